#pragma once

#include <functional>
#include <string>
#include <vector>

#include "retsyn/nn/optim.hpp"
#include "retsyn/nn/unet.hpp"
#include "retsyn/tensor.hpp"

namespace retsyn::diffusion {

struct DiffusionSchedule {
    int timesteps = 0;
    std::vector<double> beta, alpha, alpha_bar;
};

// Scaled-linear construction: beta[t] = (sqrt(b0) + t/(T-1)*(sqrt(b1)-sqrt(b0)))^2.
DiffusionSchedule build_schedule(int timesteps, double beta_start, double beta_end);

// Closed-form forward process: sqrt(ab[t])*x0 + sqrt(1-ab[t])*eps.
Tensor q_sample(const Tensor& x0, int t, const Tensor& epsilon, const DiffusionSchedule& s);
Tensor q_sample_batch(const Tensor& x0, const std::vector<int>& t, const Tensor& epsilon,
                      const DiffusionSchedule& s);

// Noise-predictor signature shared by the trained U-Net and test oracles.
using NoisePredictor =
    std::function<Tensor(const Tensor& x_t, const std::vector<int>& t, const std::vector<int>& labels)>;

struct DdpmTrainConfig {
    int epochs = 30;
    int batch_size = 8;
    double lr = 1e-3;  // cosine-annealed over the full run
    uint64_t seed = 0;
};

struct DdpmDataset {
    Tensor images;  // [N,1,H,W], values in [0,1]
    std::vector<int> labels;
};

// One optimizer step on a batch of [0,1] images: draws t and epsilon, noises,
// regresses predicted noise onto epsilon. Returns the batch loss.
float train_step(nn::CondUNet& model, nn::Adam& opt, const Tensor& batch01,
                 const std::vector<int>& labels, const DiffusionSchedule& sched, Rng& rng);

struct TrainCurve {
    std::vector<float> step_losses;
    double early_average(int steps = 10) const;
    double last_epoch_average(int steps_per_epoch) const;
};

TrainCurve train_ddpm(nn::CondUNet& model, const DdpmDataset& data, const DiffusionSchedule& sched,
                      const DdpmTrainConfig& cfg);

// Ancestral reverse loop from pure noise under a fixed class condition.
// Outputs n images clipped to [0,1]. Deterministic given the rng state;
// advances the rng so successive calls produce fresh batches.
std::vector<Image> sample(const NoisePredictor& predict, const DiffusionSchedule& sched,
                          int class_label, int n, int side, Rng& rng);

// Adapts a CondUNet to the NoisePredictor signature.
NoisePredictor predictor_for(nn::CondUNet& model);

}  // namespace retsyn::diffusion

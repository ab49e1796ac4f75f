#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "retsyn/dataman.hpp"
#include "retsyn/evalkit.hpp"
#include "retsyn/nn/backbones.hpp"

namespace retsyn::classify {

enum class TrainRegime { REAL_ONLY, SYNTH_ONLY, PRETRAIN_FINETUNE };
std::string to_string(TrainRegime r);
TrainRegime regime_from_string(const std::string& s);

// Mean focal loss over a batch: -alpha * (1-p_t)^gamma * log(p_t) with
// p_t = p for y=1 and 1-p otherwise. `dp` (optional) receives dL/dp.
double focal_loss(const std::vector<double>& p, const std::vector<int>& y, double gamma,
                  double alpha, std::vector<double>* dp = nullptr);

// Inverse-class-frequency sampling weights; expected class ratio under
// replacement sampling is 1:1.
std::vector<double> sampler_weights(const std::vector<int>& labels);

struct LabeledImages {
    std::vector<Image> images;
    std::vector<int> y_pos;  // 1 = AmyloidPET positive
    std::vector<std::string> eye_ids;
    size_t size() const { return images.size(); }
};

struct ClassifierTrainConfig {
    nn::BackboneConfig backbone;  // num_outputs forced to 1
    int epochs = 200;
    int patience = 20;  // early stopping on validation focal loss
    double lr = 1e-3;
    int lr_step = 50;
    double lr_gamma = 0.5;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    int batch_size = 16;
    uint64_t seed = 0;
    bool augment_enabled = true;
    dataman::AugmentConfig augment;
    std::string modality;  // steers augmentation rules (B-scan zoom lock)
};

struct UnimodalResult {
    std::unique_ptr<nn::Backbone> net;
    evalkit::MetricsReport val_metrics;
    int best_epoch = -1;
    int epochs_ran = 0;
    std::vector<double> val_losses;
};

// p_neg predictions for a set of images (eval mode, no augmentation).
std::vector<double> predict_p_neg(nn::Backbone& net, const std::vector<Image>& images);

// Trains the binary p_neg head under the given regime. `synth` must hold
// gated synthetic images for SYNTH_ONLY / PRETRAIN_FINETUNE.
UnimodalResult train_unimodal(const LabeledImages& train_real, const LabeledImages& val,
                              TrainRegime regime, const LabeledImages* synth,
                              const ClassifierTrainConfig& cfg);

// ---------------------------------------------------------------------------
// Late heterogeneous fusion

struct PredictionRecord {
    std::string eye_id;
    std::map<std::string, double> p_neg;  // by modality
    std::vector<double> metadata;         // encoded (age*0.01, sex); may be empty
    int y_pos = 0;
};

void save_predictions(const std::string& path, const std::string& modality,
                      const std::vector<std::string>& eye_ids, const std::vector<double>& p_neg,
                      const std::vector<int>& y_pos);

struct FusionConfig {
    bool use_metadata = false;
    std::vector<int> hidden = {16, 8};
    int epochs = 200;
    double lr = 1e-2;
    int batch_size = 16;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    uint64_t seed = 0;
    std::vector<std::string> modalities = dataman::pipeline_modalities();
};

// Three fully connected layers over the unimodal scores (+2 metadata inputs
// when enabled), producing p_neg.
struct FusionModel : nn::Module {
    FusionConfig cfg;
    nn::Linear fc1, fc2, fc3;
    nn::ReLU a1, a2;

    FusionModel() = default;
    FusionModel(const FusionConfig& config, uint64_t seed);

    Tensor forward(const Tensor& x);      // [N, D] -> logits [N, 1]
    void backward(const Tensor& dlogit);
    void collect(std::vector<nn::Param*>& out) override;
    int input_width() const;

    std::vector<double> predict_p_neg(const std::vector<PredictionRecord>& recs);
    Tensor features_of(const std::vector<PredictionRecord>& recs) const;
};

struct FusionResult {
    FusionModel model;
    evalkit::MetricsReport val_metrics;
};

// Unimodal models stay frozen; training uses the last-epoch checkpoint.
// A record missing any modality score is an error.
FusionResult train_multimodal(const std::vector<PredictionRecord>& train,
                              const std::vector<PredictionRecord>& val, const FusionConfig& cfg);

// Metric suite under the output-probability duality: scores enter as p_neg
// and are inverted so sensitivity/specificity describe positive detection.
evalkit::MetricsReport metrics_from_p_neg(const std::vector<double>& p_neg,
                                          const std::vector<int>& y_pos);

}  // namespace retsyn::classify

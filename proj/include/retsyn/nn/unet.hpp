#pragma once

#include <memory>
#include <vector>

#include "retsyn/nn/layers.hpp"

namespace retsyn::nn {

struct UNetConfig {
    int in_channels = 1;
    std::vector<int> channels = {64, 128, 128};
    int res_blocks = 2;           // residual blocks per encoder/decoder level
    int attn_head_channels = 32;  // attention lives at the deepest level only
    int num_classes = 2;
    int temb_dim = 0;  // 0 -> 4 * channels[0]

    int temb() const { return temb_dim > 0 ? temb_dim : 4 * channels[0]; }
};

// Timestep embedding plus class-label embedding of equal width; the network
// conditions on their elementwise sum.
struct ConditionEmbedding {
    Tensor time_vec;   // [N, D]
    Tensor class_vec;  // [N, D]
    Tensor combined() const {
        Tensor c = time_vec;
        for (size_t i = 0; i < c.data.size(); ++i) c.data[i] += class_vec.data[i];
        return c;
    }
};

struct ResBlock : Module {
    int in_c = 0, out_c = 0;
    GroupNorm gn1, gn2;
    SiLU act1, act2, act_emb;
    Conv2d conv1, conv2;
    Linear emb_proj;
    Conv2d skip;  // 1x1, only when in_c != out_c
    bool has_skip = false;

    ResBlock() = default;
    ResBlock(const std::string& name, int in_channels, int out_channels, int temb_dim, Rng& rng);

    // cond is [N, temb]; demb accumulates the gradient w.r.t. cond.
    Tensor forward(const Tensor& x, const Tensor& cond);
    Tensor backward(const Tensor& dy, Tensor& dcond);
    void collect(std::vector<Param*>& out) override;
};

// Class-conditional noise-prediction U-Net. forward() consumes the noised
// batch with per-sample timesteps and class labels and returns predicted
// noise of the same shape.
struct CondUNet : Module {
    UNetConfig cfg;

    CondUNet() = default;
    CondUNet(const UNetConfig& config, uint64_t seed);

    Tensor forward(const Tensor& x, const std::vector<int>& timesteps, const std::vector<int>& labels);
    void backward(const Tensor& deps);
    void collect(std::vector<Param*>& out) override;

    ConditionEmbedding condition_embedding(const std::vector<int>& timesteps,
                                           const std::vector<int>& labels);

private:
    // time embedding
    Linear time_fc1, time_fc2;
    SiLU time_act;
    Embedding class_emb;

    Conv2d stem;
    struct Level {
        std::vector<ResBlock> blocks;
        std::vector<SelfAttention2d> attn;  // parallel to blocks when attended
        bool attended = false;
        Conv2d down;  // stride-2; absent on last level
        bool has_down = false;
    };
    std::vector<Level> enc_;
    ResBlock mid1_, mid2_;
    SelfAttention2d mid_attn_;
    struct UpLevel {
        std::vector<ResBlock> blocks;
        std::vector<SelfAttention2d> attn;
        std::vector<int> skip_c;  // channels popped from the skip stack per block
        bool attended = false;
        NearestUpsample2x up;
        Conv2d up_conv;
        bool has_up = false;
    };
    std::vector<UpLevel> dec_;
    GroupNorm out_norm;
    SiLU out_act;
    Conv2d out_conv;

    // forward caches
    std::vector<Tensor> skips_;
    Tensor cond_;
    std::vector<int> labels_;
    Tensor sin_emb_;
    std::vector<int> skip_channels_;
};

}  // namespace retsyn::nn

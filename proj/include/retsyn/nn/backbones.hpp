#pragma once

#include <memory>
#include <string>
#include <vector>

#include "retsyn/nn/layers.hpp"

namespace retsyn::nn {

struct BackboneConfig {
    std::string kind = "effnet_b0";  // "effnet_b0" | "compact"
    int in_channels = 3;
    int num_outputs = 1;
    std::vector<int> compact_widths = {16, 32, 64, 128};
    bool film = false;   // modality-aware variant
    int film_emb_dim = 0;
};

// Image classifier split into a convolutional feature extractor and a pooled
// linear head. The split point doubles as the Grad-CAM hook: features() ends
// at the last convolutional stage.
struct Backbone : Module {
    virtual Tensor forward_features(const Tensor& x, const Tensor* film_emb = nullptr) = 0;
    virtual Tensor forward_head(const Tensor& feats) = 0;
    virtual Tensor backward_head(const Tensor& dlogits) = 0;  // returns dfeats
    virtual void backward_features(const Tensor& dfeats) = 0;
    virtual const Tensor& pooled_embedding() const = 0;  // GAP output of last forward_head
    virtual int feature_channels() const = 0;
    virtual int embed_dim() const = 0;
    virtual const BackboneConfig& config() const = 0;
    virtual std::string hook_name() const = 0;

    Tensor forward(const Tensor& x, const Tensor* film_emb = nullptr) {
        return forward_head(forward_features(x, film_emb));
    }
    void backward(const Tensor& dlogits) { backward_features(backward_head(dlogits)); }
};

std::unique_ptr<Backbone> make_backbone(const BackboneConfig& cfg, uint64_t seed);

// Squeeze-excitation: x * sigmoid(fc2(silu(fc1(gap(x))))), per channel.
struct SEBlock : Module {
    Linear fc1, fc2;
    SiLU act;
    Sigmoid gate;
    GlobalAvgPool pool;

    SEBlock() = default;
    SEBlock(const std::string& name, int channels, int reduced, Rng& rng);

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>& out) override;

private:
    Tensor x_, s_;
};

// FiLM site: a learned linear map from a conditioning embedding to per-channel
// scale and bias. Scale rows of the generator bias start at 1 so the site is
// an identity at initialization.
struct FilmSite : Module {
    Linear gen;
    int channels = 0;

    FilmSite() = default;
    FilmSite(const std::string& name, int emb_dim, int channels_, Rng& rng);

    Tensor forward(const Tensor& x, const Tensor& emb);
    Tensor backward(const Tensor& dy);  // embedding gradient is discarded (frozen source)
    void collect(std::vector<Param*>& out) override { gen.collect(out); }

private:
    Tensor x_, scale_;
};

}  // namespace retsyn::nn

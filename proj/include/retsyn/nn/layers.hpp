#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "retsyn/rng.hpp"
#include "retsyn/tensor.hpp"

namespace retsyn::nn {

// A named parameter blob with its gradient accumulator. Non-trainable params
// (batch-norm running stats) ride along for checkpointing but are skipped by
// the optimizer.
struct Param {
    std::string name;
    std::vector<int> shape;
    std::vector<float> w;
    std::vector<float> g;
    bool trainable = true;

    void resize(std::vector<int> s) {
        shape = std::move(s);
        size_t n = static_cast<size_t>(Tensor::numel_of(shape));
        w.assign(n, 0.0f);
        g.assign(n, 0.0f);
    }
    int64_t numel() const { return static_cast<int64_t>(w.size()); }
    void zero_grad() { std::fill(g.begin(), g.end(), 0.0f); }
};

struct Module {
    virtual ~Module() = default;
    virtual void collect(std::vector<Param*>& out) = 0;
    virtual void set_training(bool t) { training = t; }
    bool training = true;

    std::vector<Param*> params() {
        std::vector<Param*> v;
        collect(v);
        return v;
    }
    int64_t param_count() {
        int64_t n = 0;
        for (auto* p : params()) n += p->numel();
        return n;
    }
};

// ---------------------------------------------------------------------------
// Initialization

void kaiming_normal(Param& p, int fan_in, Rng& rng, float gain = std::sqrt(2.0f));
void uniform_init(Param& p, float lo, float hi, Rng& rng);

// ---------------------------------------------------------------------------
// Layers

struct Conv2d : Module {
    int in_c = 0, out_c = 0, ksize = 3, stride = 1, pad = 1, groups = 1;
    Param weight, bias;

    Conv2d() = default;
    Conv2d(std::string name, int in_channels, int out_channels, int k, int s, int p,
           int groups_, Rng& rng);

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>& out) override {
        out.push_back(&weight);
        out.push_back(&bias);
    }

    int out_h(int h) const { return (h + 2 * pad - ksize) / stride + 1; }
    int out_w(int w) const { return (w + 2 * pad - ksize) / stride + 1; }

private:
    Tensor x_;  // cached input
};

struct Linear : Module {
    int in_f = 0, out_f = 0;
    Param weight, bias;  // weight [out, in]

    Linear() = default;
    Linear(std::string name, int in_features, int out_features, Rng& rng);

    Tensor forward(const Tensor& x);   // x [N, in]
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>& out) override {
        out.push_back(&weight);
        out.push_back(&bias);
    }

private:
    Tensor x_;
};

struct GroupNorm : Module {
    int groups = 8, channels = 0;
    float eps = 1e-5f;
    Param gamma, beta;

    GroupNorm() = default;
    GroupNorm(std::string name, int groups_, int channels_);

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>& out) override {
        out.push_back(&gamma);
        out.push_back(&beta);
    }

private:
    Tensor xhat_;
    std::vector<float> inv_std_;  // per (n, group)
};

struct BatchNorm2d : Module {
    int channels = 0;
    float eps = 1e-5f, momentum = 0.1f;
    Param gamma, beta, running_mean, running_var;

    BatchNorm2d() = default;
    explicit BatchNorm2d(std::string name, int channels_);

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>& out) override {
        out.push_back(&gamma);
        out.push_back(&beta);
        out.push_back(&running_mean);
        out.push_back(&running_var);
    }

private:
    Tensor xhat_;
    std::vector<float> inv_std_;  // per channel (training batch stats)
    int count_ = 0;
};

struct SiLU : Module {
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>&) override {}

private:
    Tensor x_;
};

struct ReLU : Module {
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>&) override {}

private:
    Tensor x_;
};

struct Sigmoid : Module {
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>&) override {}

private:
    Tensor y_;
};

// Global average pool: [N,C,H,W] -> [N,C]
struct GlobalAvgPool : Module {
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>&) override {}

private:
    std::vector<int> in_shape_;
};

struct NearestUpsample2x : Module {
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>&) override {}

private:
    std::vector<int> in_shape_;
};

struct Embedding : Module {
    int num = 0, dim = 0;
    Param table;  // [num, dim]

    Embedding() = default;
    Embedding(std::string name, int num_, int dim_, Rng& rng);

    Tensor forward(const std::vector<int>& idx);    // -> [N, dim]
    void backward(const Tensor& dy);                // accumulates into table.g
    void collect(std::vector<Param*>& out) override { out.push_back(&table); }

private:
    std::vector<int> idx_;
};

// Multi-head self-attention over spatial positions with pre-norm and a
// residual connection: y = x + proj(attn(norm(x))).
struct SelfAttention2d : Module {
    int channels = 0, head_channels = 32, heads = 1;
    GroupNorm norm;
    Conv2d qkv;   // 1x1, C -> 3C
    Conv2d proj;  // 1x1, C -> C

    SelfAttention2d() = default;
    SelfAttention2d(std::string name, int channels_, int head_channels_, Rng& rng);

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    void collect(std::vector<Param*>& out) override {
        norm.collect(out);
        qkv.collect(out);
        proj.collect(out);
    }

private:
    Tensor qkv_out_;
    std::vector<float> attn_;  // [N, heads, T, T] softmax probabilities
    int t_ = 0;
};

// FiLM primitive: y = scale (.) x + bias, broadcast per channel.
// scale/bias are [N,C]; gradients for all three inputs are produced.
struct FilmResult {
    Tensor dx, dscale, dbias;
};
Tensor film_modulate(const Tensor& x, const Tensor& scale, const Tensor& bias);
FilmResult film_backward(const Tensor& x, const Tensor& scale, const Tensor& dy);

// ---------------------------------------------------------------------------
// Losses (return loss value and write gradient w.r.t. first argument)

float mse_loss(const Tensor& pred, const Tensor& target, Tensor* dpred);

// Softmax cross entropy over logits [N,K] with integer labels.
float softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels, Tensor* dlogits);
// Row-wise softmax probabilities of logits [N,K].
Tensor softmax_rows(const Tensor& logits);

// Sinusoidal position embedding for timestep t; dim must be even.
std::vector<float> sinusoidal_embedding(int t, int dim);

// Concatenate two NCHW tensors along channels.
Tensor concat_channels(const Tensor& a, const Tensor& b);
// Split gradient of concat back into the two channel blocks.
void split_channels(const Tensor& d, int c_a, Tensor* da, Tensor* db);

}  // namespace retsyn::nn

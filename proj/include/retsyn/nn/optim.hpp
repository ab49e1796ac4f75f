#pragma once

#include <cmath>
#include <vector>

#include "retsyn/nn/layers.hpp"

namespace retsyn::nn {

struct Adam {
    float lr = 1e-3f;
    float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
    float weight_decay = 0.0f;  // L2 added to gradient

    explicit Adam(std::vector<Param*> params, float lr_ = 1e-3f, float weight_decay_ = 0.0f)
        : lr(lr_), weight_decay(weight_decay_), params_(std::move(params)) {
        for (auto* p : params_) {
            m_.emplace_back(p->w.size(), 0.0f);
            v_.emplace_back(p->w.size(), 0.0f);
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    void step() {
        ++t_;
        float bc1 = 1.0f - std::pow(beta1, static_cast<float>(t_));
        float bc2 = 1.0f - std::pow(beta2, static_cast<float>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Param* p = params_[i];
            if (!p->trainable) continue;
            for (size_t j = 0; j < p->w.size(); ++j) {
                float g = p->g[j] + weight_decay * p->w[j];
                m_[i][j] = beta1 * m_[i][j] + (1.0f - beta1) * g;
                v_[i][j] = beta2 * v_[i][j] + (1.0f - beta2) * g * g;
                float mhat = m_[i][j] / bc1;
                float vhat = v_[i][j] / bc2;
                p->w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    int steps_taken() const { return t_; }

private:
    std::vector<Param*> params_;
    std::vector<std::vector<float>> m_, v_;
    int t_ = 0;
};

// lr(t) = eta_min + (eta_max - eta_min) * (1 + cos(pi*t/T)) / 2
struct CosineAnnealing {
    float eta_max = 1e-3f, eta_min = 0.0f;
    int t_max = 1;

    float at(int t) const {
        if (t >= t_max) return eta_min;
        return eta_min + 0.5f * (eta_max - eta_min) *
                             (1.0f + std::cos(M_PI * static_cast<float>(t) / static_cast<float>(t_max)));
    }
};

struct StepLR {
    float lr0 = 1e-3f;
    int step_size = 50;
    float gamma = 0.5f;

    float at(int epoch) const {
        return lr0 * std::pow(gamma, static_cast<float>(epoch / step_size));
    }
};

}  // namespace retsyn::nn

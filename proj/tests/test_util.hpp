#pragma once

#include <cmath>
#include <vector>

#include "retsyn/rng.hpp"
#include "retsyn/tensor.hpp"

namespace testutil {

using retsyn::Rng;
using retsyn::Tensor;

inline void fill_random(Tensor& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
}

inline double dot_loss(const Tensor& y, const std::vector<float>& w) {
    double s = 0.0;
    for (size_t i = 0; i < y.data.size(); ++i) s += static_cast<double>(y.data[i]) * w[i];
    return s;
}

// Central-difference dL/dv where L is a fixed random projection of forward().
template <class Forward>
double numeric_grad(Forward&& forward, const std::vector<float>& proj, float* v,
                    double eps = 1e-2) {
    float saved = *v;
    *v = saved + static_cast<float>(eps);
    double lp = dot_loss(forward(), proj);
    *v = saved - static_cast<float>(eps);
    double lm = dot_loss(forward(), proj);
    *v = saved;
    return (lp - lm) / (2.0 * eps);
}

inline bool close_rel(double a, double b, double tol, double floor = 0.05) {
    double denom = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / denom <= tol;
}

}  // namespace testutil

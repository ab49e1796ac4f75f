#include "retsyn/nn/layers.hpp"

#include <Eigen/Dense>

#include <algorithm>

namespace retsyn::nn {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatRM>;
using CMatMap = Eigen::Map<const MatRM>;

void kaiming_normal(Param& p, int fan_in, Rng& rng, float gain) {
    float std = gain / std::sqrt(static_cast<float>(fan_in));
    for (auto& v : p.w) v = static_cast<float>(rng.gaussian(0.0, std));
}

void uniform_init(Param& p, float lo, float hi, Rng& rng) {
    for (auto& v : p.w) v = static_cast<float>(rng.uniform(lo, hi));
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int k, int s, int p,
               int groups_, Rng& rng)
    : in_c(in_channels), out_c(out_channels), ksize(k), stride(s), pad(p), groups(groups_) {
    if (in_c % groups != 0 || out_c % groups != 0) raise("Conv2d: channels not divisible by groups");
    weight.name = name + ".weight";
    weight.resize({out_c, in_c / groups, ksize, ksize});
    bias.name = name + ".bias";
    bias.resize({out_c});
    kaiming_normal(weight, (in_c / groups) * ksize * ksize, rng);
}

namespace {

void im2col(const float* x, int C, int H, int W, int k, int stride, int pad,
            int OH, int OW, float* col) {
    // col is [C*k*k, OH*OW]
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                float* dst = col + ((static_cast<size_t>(c) * k + ki) * k + kj) * OH * OW;
                for (int oh = 0; oh < OH; ++oh) {
                    int ih = oh * stride + ki - pad;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst + static_cast<size_t>(oh) * OW, dst + (static_cast<size_t>(oh) + 1) * OW, 0.0f);
                        continue;
                    }
                    const float* src_row = x + (static_cast<size_t>(c) * H + ih) * W;
                    float* drow = dst + static_cast<size_t>(oh) * OW;
                    int iw0 = kj - pad;
                    if (stride == 1) {
                        for (int ow = 0; ow < OW; ++ow) {
                            int iw = iw0 + ow;
                            drow[ow] = (iw >= 0 && iw < W) ? src_row[iw] : 0.0f;
                        }
                    } else {
                        for (int ow = 0; ow < OW; ++ow) {
                            int iw = iw0 + ow * stride;
                            drow[ow] = (iw >= 0 && iw < W) ? src_row[iw] : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

void col2im(const float* col, int C, int H, int W, int k, int stride, int pad,
            int OH, int OW, float* x) {
    // accumulate into x (caller zeroes)
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const float* src = col + ((static_cast<size_t>(c) * k + ki) * k + kj) * OH * OW;
                for (int oh = 0; oh < OH; ++oh) {
                    int ih = oh * stride + ki - pad;
                    if (ih < 0 || ih >= H) continue;
                    float* dst_row = x + (static_cast<size_t>(c) * H + ih) * W;
                    const float* srow = src + static_cast<size_t>(oh) * OW;
                    int iw0 = kj - pad;
                    for (int ow = 0; ow < OW; ++ow) {
                        int iw = iw0 + ow * stride;
                        if (iw >= 0 && iw < W) dst_row[iw] += srow[ow];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x) {
    if (x.c() != in_c) raise("Conv2d: channel mismatch");
    x_ = x;
    int N = x.n(), H = x.h(), W = x.w();
    int OH = out_h(H), OW = out_w(W);
    Tensor y({N, out_c, OH, OW});

    int icg = in_c / groups, ocg = out_c / groups;
    int col_rows = icg * ksize * ksize;
    std::vector<float> col(static_cast<size_t>(col_rows) * OH * OW);

    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const float* xg = x.ptr() + (static_cast<size_t>(n) * in_c + g * icg) * H * W;
            float* yg = y.ptr() + (static_cast<size_t>(n) * out_c + g * ocg) * OH * OW;
            CMatMap wmap(weight.w.data() + static_cast<size_t>(g) * ocg * col_rows, ocg, col_rows);
            MatMap ymap(yg, ocg, OH * OW);
            if (ksize == 1 && stride == 1 && pad == 0) {
                CMatMap xmap(xg, icg, H * W);
                ymap.noalias() = wmap * xmap;
            } else {
                im2col(xg, icg, H, W, ksize, stride, pad, OH, OW, col.data());
                CMatMap cmap(col.data(), col_rows, OH * OW);
                ymap.noalias() = wmap * cmap;
            }
            for (int oc = 0; oc < ocg; ++oc)
                ymap.row(oc).array() += bias.w[static_cast<size_t>(g) * ocg + oc];
        }
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
    const Tensor& x = x_;
    int N = x.n(), H = x.h(), W = x.w();
    int OH = dy.h(), OW = dy.w();
    Tensor dx({N, in_c, H, W});

    int icg = in_c / groups, ocg = out_c / groups;
    int col_rows = icg * ksize * ksize;
    std::vector<float> col(static_cast<size_t>(col_rows) * OH * OW);
    std::vector<float> dcol(static_cast<size_t>(col_rows) * OH * OW);

    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const float* xg = x.ptr() + (static_cast<size_t>(n) * in_c + g * icg) * H * W;
            const float* dyg = dy.ptr() + (static_cast<size_t>(n) * out_c + g * ocg) * OH * OW;
            float* dxg = dx.ptr() + (static_cast<size_t>(n) * in_c + g * icg) * H * W;
            CMatMap wmap(weight.w.data() + static_cast<size_t>(g) * ocg * col_rows, ocg, col_rows);
            MatMap gwmap(weight.g.data() + static_cast<size_t>(g) * ocg * col_rows, ocg, col_rows);
            CMatMap dymap(dyg, ocg, OH * OW);

            if (ksize == 1 && stride == 1 && pad == 0) {
                CMatMap xmap(xg, icg, H * W);
                gwmap.noalias() += dymap * xmap.transpose();
                MatMap dxmap(dxg, icg, H * W);
                dxmap.noalias() += wmap.transpose() * dymap;
            } else {
                im2col(xg, icg, H, W, ksize, stride, pad, OH, OW, col.data());
                CMatMap cmap(col.data(), col_rows, OH * OW);
                gwmap.noalias() += dymap * cmap.transpose();
                MatMap dcmap(dcol.data(), col_rows, OH * OW);
                dcmap.noalias() = wmap.transpose() * dymap;
                col2im(dcol.data(), icg, H, W, ksize, stride, pad, OH, OW, dxg);
            }
            for (int oc = 0; oc < ocg; ++oc)
                bias.g[static_cast<size_t>(g) * ocg + oc] += dymap.row(oc).sum();
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::string name, int in_features, int out_features, Rng& rng)
    : in_f(in_features), out_f(out_features) {
    weight.name = name + ".weight";
    weight.resize({out_f, in_f});
    bias.name = name + ".bias";
    bias.resize({out_f});
    float bound = 1.0f / std::sqrt(static_cast<float>(in_f));
    uniform_init(weight, -bound, bound, rng);
    uniform_init(bias, -bound, bound, rng);
}

Tensor Linear::forward(const Tensor& x) {
    if (x.ndim() != 2 || x.dim(1) != in_f) raise("Linear: shape mismatch");
    x_ = x;
    int N = x.dim(0);
    Tensor y({N, out_f});
    CMatMap xm(x.ptr(), N, in_f);
    CMatMap wm(weight.w.data(), out_f, in_f);
    MatMap ym(y.ptr(), N, out_f);
    ym.noalias() = xm * wm.transpose();
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < out_f; ++j) ym(i, j) += bias.w[static_cast<size_t>(j)];
    return y;
}

Tensor Linear::backward(const Tensor& dy) {
    int N = x_.dim(0);
    CMatMap dym(dy.ptr(), N, out_f);
    CMatMap xm(x_.ptr(), N, in_f);
    CMatMap wm(weight.w.data(), out_f, in_f);
    MatMap gwm(weight.g.data(), out_f, in_f);
    gwm.noalias() += dym.transpose() * xm;
    for (int j = 0; j < out_f; ++j) bias.g[static_cast<size_t>(j)] += dym.col(j).sum();
    Tensor dx({N, in_f});
    MatMap dxm(dx.ptr(), N, in_f);
    dxm.noalias() = dym * wm;
    return dx;
}

// ---------------------------------------------------------------------------
// GroupNorm

GroupNorm::GroupNorm(std::string name, int groups_, int channels_)
    : groups(groups_), channels(channels_) {
    if (channels % groups != 0) raise("GroupNorm: channels not divisible by groups");
    gamma.name = name + ".gamma";
    gamma.resize({channels});
    std::fill(gamma.w.begin(), gamma.w.end(), 1.0f);
    beta.name = name + ".beta";
    beta.resize({channels});
}

Tensor GroupNorm::forward(const Tensor& x) {
    int N = x.n(), C = x.c(), H = x.h(), W = x.w();
    int cg = C / groups;
    size_t m = static_cast<size_t>(cg) * H * W;
    Tensor y = x;
    xhat_ = Tensor({N, C, H, W});
    inv_std_.assign(static_cast<size_t>(N) * groups, 0.0f);

    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const float* p = x.ptr() + (static_cast<size_t>(n) * C + g * cg) * H * W;
            double mean = 0.0, var = 0.0;
            for (size_t i = 0; i < m; ++i) mean += p[i];
            mean /= static_cast<double>(m);
            for (size_t i = 0; i < m; ++i) {
                double d = p[i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(m);
            float is = static_cast<float>(1.0 / std::sqrt(var + eps));
            inv_std_[static_cast<size_t>(n) * groups + g] = is;
            float* xh = xhat_.ptr() + (static_cast<size_t>(n) * C + g * cg) * H * W;
            float* yp = y.ptr() + (static_cast<size_t>(n) * C + g * cg) * H * W;
            for (int c = 0; c < cg; ++c) {
                float ga = gamma.w[static_cast<size_t>(g) * cg + c];
                float be = beta.w[static_cast<size_t>(g) * cg + c];
                const float* pc = p + static_cast<size_t>(c) * H * W;
                float* xhc = xh + static_cast<size_t>(c) * H * W;
                float* yc = yp + static_cast<size_t>(c) * H * W;
                for (int i = 0; i < H * W; ++i) {
                    float v = (pc[i] - static_cast<float>(mean)) * is;
                    xhc[i] = v;
                    yc[i] = ga * v + be;
                }
            }
        }
    }
    return y;
}

Tensor GroupNorm::backward(const Tensor& dy) {
    int N = dy.n(), C = dy.c(), H = dy.h(), W = dy.w();
    int cg = C / groups;
    size_t m = static_cast<size_t>(cg) * H * W;
    Tensor dx({N, C, H, W});

    // Parameter grads.
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const float* dyc = dy.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
            const float* xhc = xhat_.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
            double dg = 0.0, db = 0.0;
            for (int i = 0; i < H * W; ++i) {
                dg += static_cast<double>(dyc[i]) * xhc[i];
                db += dyc[i];
            }
            gamma.g[static_cast<size_t>(c)] += static_cast<float>(dg);
            beta.g[static_cast<size_t>(c)] += static_cast<float>(db);
        }
    }

    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const float* dyg = dy.ptr() + (static_cast<size_t>(n) * C + g * cg) * H * W;
            const float* xhg = xhat_.ptr() + (static_cast<size_t>(n) * C + g * cg) * H * W;
            float* dxg = dx.ptr() + (static_cast<size_t>(n) * C + g * cg) * H * W;
            float is = inv_std_[static_cast<size_t>(n) * groups + g];

            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int c = 0; c < cg; ++c) {
                float ga = gamma.w[static_cast<size_t>(g) * cg + c];
                const float* dyc = dyg + static_cast<size_t>(c) * H * W;
                const float* xhc = xhg + static_cast<size_t>(c) * H * W;
                for (int i = 0; i < H * W; ++i) {
                    float dxh = dyc[i] * ga;
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += static_cast<double>(dxh) * xhc[i];
                }
            }
            float inv_m = 1.0f / static_cast<float>(m);
            for (int c = 0; c < cg; ++c) {
                float ga = gamma.w[static_cast<size_t>(g) * cg + c];
                const float* dyc = dyg + static_cast<size_t>(c) * H * W;
                const float* xhc = xhg + static_cast<size_t>(c) * H * W;
                float* dxc = dxg + static_cast<size_t>(c) * H * W;
                for (int i = 0; i < H * W; ++i) {
                    float dxh = dyc[i] * ga;
                    dxc[i] = is * (dxh - inv_m * static_cast<float>(sum_dxhat) -
                                   xhc[i] * inv_m * static_cast<float>(sum_dxhat_xhat));
                }
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(std::string name, int channels_) : channels(channels_) {
    gamma.name = name + ".gamma";
    gamma.resize({channels});
    std::fill(gamma.w.begin(), gamma.w.end(), 1.0f);
    beta.name = name + ".beta";
    beta.resize({channels});
    running_mean.name = name + ".running_mean";
    running_mean.resize({channels});
    running_mean.trainable = false;
    running_var.name = name + ".running_var";
    running_var.resize({channels});
    std::fill(running_var.w.begin(), running_var.w.end(), 1.0f);
    running_var.trainable = false;
}

Tensor BatchNorm2d::forward(const Tensor& x) {
    int N = x.n(), C = x.c(), H = x.h(), W = x.w();
    Tensor y = x;
    if (training) {
        xhat_ = Tensor({N, C, H, W});
        inv_std_.assign(static_cast<size_t>(C), 0.0f);
        count_ = N * H * W;
        for (int c = 0; c < C; ++c) {
            double mean = 0.0, var = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = x.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
                for (int i = 0; i < H * W; ++i) mean += p[i];
            }
            mean /= count_;
            for (int n = 0; n < N; ++n) {
                const float* p = x.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
                for (int i = 0; i < H * W; ++i) {
                    double d = p[i] - mean;
                    var += d * d;
                }
            }
            var /= count_;
            float is = static_cast<float>(1.0 / std::sqrt(var + eps));
            inv_std_[static_cast<size_t>(c)] = is;
            running_mean.w[static_cast<size_t>(c)] =
                (1.0f - momentum) * running_mean.w[static_cast<size_t>(c)] + momentum * static_cast<float>(mean);
            running_var.w[static_cast<size_t>(c)] =
                (1.0f - momentum) * running_var.w[static_cast<size_t>(c)] + momentum * static_cast<float>(var);
            float ga = gamma.w[static_cast<size_t>(c)], be = beta.w[static_cast<size_t>(c)];
            for (int n = 0; n < N; ++n) {
                const float* p = x.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
                float* xh = xhat_.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
                float* yp = y.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
                for (int i = 0; i < H * W; ++i) {
                    float v = (p[i] - static_cast<float>(mean)) * is;
                    xh[i] = v;
                    yp[i] = ga * v + be;
                }
            }
        }
    } else {
        for (int c = 0; c < C; ++c) {
            float mean = running_mean.w[static_cast<size_t>(c)];
            float is = 1.0f / std::sqrt(running_var.w[static_cast<size_t>(c)] + eps);
            float ga = gamma.w[static_cast<size_t>(c)], be = beta.w[static_cast<size_t>(c)];
            for (int n = 0; n < N; ++n) {
                const float* p = x.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
                float* yp = y.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
                for (int i = 0; i < H * W; ++i) yp[i] = ga * (p[i] - mean) * is + be;
            }
        }
    }
    return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
    if (!training) raise("BatchNorm2d: backward in eval mode");
    int N = dy.n(), C = dy.c(), H = dy.h(), W = dy.w();
    Tensor dx({N, C, H, W});
    float inv_m = 1.0f / static_cast<float>(count_);
    for (int c = 0; c < C; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int n = 0; n < N; ++n) {
            const float* dyc = dy.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
            const float* xhc = xhat_.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
            for (int i = 0; i < H * W; ++i) {
                sum_dy += dyc[i];
                sum_dy_xhat += static_cast<double>(dyc[i]) * xhc[i];
            }
        }
        gamma.g[static_cast<size_t>(c)] += static_cast<float>(sum_dy_xhat);
        beta.g[static_cast<size_t>(c)] += static_cast<float>(sum_dy);
        float ga = gamma.w[static_cast<size_t>(c)];
        float is = inv_std_[static_cast<size_t>(c)];
        for (int n = 0; n < N; ++n) {
            const float* dyc = dy.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
            const float* xhc = xhat_.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
            float* dxc = dx.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
            for (int i = 0; i < H * W; ++i) {
                dxc[i] = ga * is * (dyc[i] - inv_m * static_cast<float>(sum_dy) -
                                    xhc[i] * inv_m * static_cast<float>(sum_dy_xhat));
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Activations

Tensor SiLU::forward(const Tensor& x) {
    x_ = x;
    Tensor y = x;
    for (auto& v : y.data) {
        float s = 1.0f / (1.0f + std::exp(-v));
        v = v * s;
    }
    return y;
}

Tensor SiLU::backward(const Tensor& dy) {
    Tensor dx = dy;
    for (size_t i = 0; i < dx.data.size(); ++i) {
        float v = x_.data[i];
        float s = 1.0f / (1.0f + std::exp(-v));
        dx.data[i] *= s * (1.0f + v * (1.0f - s));
    }
    return dx;
}

Tensor ReLU::forward(const Tensor& x) {
    x_ = x;
    Tensor y = x;
    for (auto& v : y.data) v = v > 0.0f ? v : 0.0f;
    return y;
}

Tensor ReLU::backward(const Tensor& dy) {
    Tensor dx = dy;
    for (size_t i = 0; i < dx.data.size(); ++i)
        if (x_.data[i] <= 0.0f) dx.data[i] = 0.0f;
    return dx;
}

Tensor Sigmoid::forward(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.data) v = 1.0f / (1.0f + std::exp(-v));
    y_ = y;
    return y;
}

Tensor Sigmoid::backward(const Tensor& dy) {
    Tensor dx = dy;
    for (size_t i = 0; i < dx.data.size(); ++i) {
        float y = y_.data[i];
        dx.data[i] *= y * (1.0f - y);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Pooling / upsample

Tensor GlobalAvgPool::forward(const Tensor& x) {
    in_shape_ = x.shape;
    int N = x.n(), C = x.c(), HW = x.h() * x.w();
    Tensor y({N, C});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const float* p = x.ptr() + (static_cast<size_t>(n) * C + c) * HW;
            double s = 0.0;
            for (int i = 0; i < HW; ++i) s += p[i];
            y.data[static_cast<size_t>(n) * C + c] = static_cast<float>(s / HW);
        }
    }
    return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy) {
    Tensor dx(in_shape_);
    int N = in_shape_[0], C = in_shape_[1], HW = in_shape_[2] * in_shape_[3];
    float inv = 1.0f / static_cast<float>(HW);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float g = dy.data[static_cast<size_t>(n) * C + c] * inv;
            float* p = dx.ptr() + (static_cast<size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) p[i] = g;
        }
    return dx;
}

Tensor NearestUpsample2x::forward(const Tensor& x) {
    in_shape_ = x.shape;
    int N = x.n(), C = x.c(), H = x.h(), W = x.w();
    Tensor y({N, C, H * 2, W * 2});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* src = x.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
            float* dst = y.ptr() + (static_cast<size_t>(n) * C + c) * H * W * 4;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    float v = src[static_cast<size_t>(i) * W + j];
                    size_t o = (static_cast<size_t>(i) * 2) * (W * 2) + j * 2;
                    dst[o] = v;
                    dst[o + 1] = v;
                    dst[o + W * 2] = v;
                    dst[o + W * 2 + 1] = v;
                }
        }
    return y;
}

Tensor NearestUpsample2x::backward(const Tensor& dy) {
    int N = in_shape_[0], C = in_shape_[1], H = in_shape_[2], W = in_shape_[3];
    Tensor dx(in_shape_);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float* dst = dx.ptr() + (static_cast<size_t>(n) * C + c) * H * W;
            const float* src = dy.ptr() + (static_cast<size_t>(n) * C + c) * H * W * 4;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    size_t o = (static_cast<size_t>(i) * 2) * (W * 2) + j * 2;
                    dst[static_cast<size_t>(i) * W + j] =
                        src[o] + src[o + 1] + src[o + W * 2] + src[o + W * 2 + 1];
                }
        }
    return dx;
}

// ---------------------------------------------------------------------------
// Embedding

Embedding::Embedding(std::string name, int num_, int dim_, Rng& rng) : num(num_), dim(dim_) {
    table.name = name + ".table";
    table.resize({num, dim});
    for (auto& v : table.w) v = static_cast<float>(rng.gaussian(0.0, 0.02));
}

Tensor Embedding::forward(const std::vector<int>& idx) {
    idx_ = idx;
    int N = static_cast<int>(idx.size());
    Tensor y({N, dim});
    for (int n = 0; n < N; ++n) {
        if (idx[static_cast<size_t>(n)] < 0 || idx[static_cast<size_t>(n)] >= num)
            raise("Embedding: index out of range");
        std::copy_n(table.w.data() + static_cast<size_t>(idx[static_cast<size_t>(n)]) * dim, dim,
                    y.ptr() + static_cast<size_t>(n) * dim);
    }
    return y;
}

void Embedding::backward(const Tensor& dy) {
    for (size_t n = 0; n < idx_.size(); ++n) {
        float* g = table.g.data() + static_cast<size_t>(idx_[n]) * dim;
        const float* d = dy.ptr() + n * dim;
        for (int i = 0; i < dim; ++i) g[i] += d[i];
    }
}

// ---------------------------------------------------------------------------
// SelfAttention2d

SelfAttention2d::SelfAttention2d(std::string name, int channels_, int head_channels_, Rng& rng)
    : channels(channels_), head_channels(head_channels_) {
    if (channels % head_channels != 0) raise("SelfAttention2d: head channels must divide width");
    heads = channels / head_channels;
    int ngroups = std::min(32, channels);
    while (channels % ngroups != 0) --ngroups;
    norm = GroupNorm(name + ".norm", ngroups, channels);
    qkv = Conv2d(name + ".qkv", channels, channels * 3, 1, 1, 0, 1, rng);
    proj = Conv2d(name + ".proj", channels, channels, 1, 1, 0, 1, rng);
    // Zero-init projection so the block starts as identity.
    std::fill(proj.weight.w.begin(), proj.weight.w.end(), 0.0f);
}

Tensor SelfAttention2d::forward(const Tensor& x) {
    int N = x.n(), C = x.c(), H = x.h(), W = x.w();
    int T = H * W, d = head_channels;
    t_ = T;
    Tensor h = norm.forward(x);
    qkv_out_ = qkv.forward(h);  // [N, 3C, H, W]
    attn_.assign(static_cast<size_t>(N) * heads * T * T, 0.0f);

    Tensor ctx({N, C, H, W});
    float scale = 1.0f / std::sqrt(static_cast<float>(d));
    for (int n = 0; n < N; ++n) {
        for (int hd = 0; hd < heads; ++hd) {
            const float* q = qkv_out_.ptr() + (static_cast<size_t>(n) * 3 * C + hd * d) * T;
            const float* k = qkv_out_.ptr() + (static_cast<size_t>(n) * 3 * C + C + hd * d) * T;
            const float* v = qkv_out_.ptr() + (static_cast<size_t>(n) * 3 * C + 2 * C + hd * d) * T;
            float* a = attn_.data() + (static_cast<size_t>(n) * heads + hd) * T * T;
            CMatMap qm(q, d, T), km(k, d, T), vm(v, d, T);
            MatMap am(a, T, T);
            am.noalias() = (qm.transpose() * km) * scale;  // [Tq, Tk]
            for (int i = 0; i < T; ++i) {
                float mx = am.row(i).maxCoeff();
                am.row(i) = (am.row(i).array() - mx).exp();
                am.row(i) /= am.row(i).sum();
            }
            float* o = ctx.ptr() + (static_cast<size_t>(n) * C + hd * d) * T;
            MatMap om(o, d, T);
            om.noalias() = vm * am.transpose();
        }
    }
    Tensor out = proj.forward(ctx);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += x.data[i];
    return out;
}

Tensor SelfAttention2d::backward(const Tensor& dy) {
    int N = dy.n(), C = dy.c(), H = dy.h(), W = dy.w();
    int T = H * W, d = head_channels;
    Tensor dctx = proj.backward(dy);

    Tensor dqkv({N, 3 * C, H, W});
    float scale = 1.0f / std::sqrt(static_cast<float>(d));
    for (int n = 0; n < N; ++n) {
        for (int hd = 0; hd < heads; ++hd) {
            const float* q = qkv_out_.ptr() + (static_cast<size_t>(n) * 3 * C + hd * d) * T;
            const float* k = qkv_out_.ptr() + (static_cast<size_t>(n) * 3 * C + C + hd * d) * T;
            const float* v = qkv_out_.ptr() + (static_cast<size_t>(n) * 3 * C + 2 * C + hd * d) * T;
            const float* a = attn_.data() + (static_cast<size_t>(n) * heads + hd) * T * T;
            const float* dout = dctx.ptr() + (static_cast<size_t>(n) * C + hd * d) * T;
            float* dq = dqkv.ptr() + (static_cast<size_t>(n) * 3 * C + hd * d) * T;
            float* dk = dqkv.ptr() + (static_cast<size_t>(n) * 3 * C + C + hd * d) * T;
            float* dv = dqkv.ptr() + (static_cast<size_t>(n) * 3 * C + 2 * C + hd * d) * T;

            CMatMap qm(q, d, T), km(k, d, T), vm(v, d, T), am(a, T, T), dom(dout, d, T);
            MatMap dqm(dq, d, T), dkm(dk, d, T), dvm(dv, d, T);

            dvm.noalias() = dom * am;  // [d,Tq]*[Tq,Tk] -> [d,Tk]
            MatRM dA(T, T);
            dA.noalias() = dom.transpose() * vm;  // [Tq,d]*[d,Tk] -> [Tq,Tk]
            // softmax backward per query row
            for (int i = 0; i < T; ++i) {
                float dot = dA.row(i).cwiseProduct(am.row(i)).sum();
                dA.row(i) = am.row(i).cwiseProduct(dA.row(i).array().operator-(dot).matrix());
            }
            dA *= scale;
            dqm.noalias() = km * dA.transpose();
            dkm.noalias() = qm * dA;
        }
    }
    Tensor dh = qkv.backward(dqkv);
    Tensor dx = norm.backward(dh);
    for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dy.data[i];  // residual
    return dx;
}

// ---------------------------------------------------------------------------
// FiLM

Tensor film_modulate(const Tensor& x, const Tensor& scale, const Tensor& bias) {
    int N = x.n(), C = x.c(), HW = x.h() * x.w();
    if (scale.ndim() != 2 || scale.dim(0) != N || scale.dim(1) != C || !scale.same_shape(bias))
        raise("film_modulate: scale/bias must be [N,C] matching activations");
    Tensor y = x;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float s = scale.data[static_cast<size_t>(n) * C + c];
            float b = bias.data[static_cast<size_t>(n) * C + c];
            float* p = y.ptr() + (static_cast<size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) p[i] = s * p[i] + b;
        }
    return y;
}

FilmResult film_backward(const Tensor& x, const Tensor& scale, const Tensor& dy) {
    int N = x.n(), C = x.c(), HW = x.h() * x.w();
    FilmResult r;
    r.dx = Tensor(x.shape);
    r.dscale = Tensor({N, C});
    r.dbias = Tensor({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float s = scale.data[static_cast<size_t>(n) * C + c];
            const float* xp = x.ptr() + (static_cast<size_t>(n) * C + c) * HW;
            const float* dp = dy.ptr() + (static_cast<size_t>(n) * C + c) * HW;
            float* dxp = r.dx.ptr() + (static_cast<size_t>(n) * C + c) * HW;
            double ds = 0.0, db = 0.0;
            for (int i = 0; i < HW; ++i) {
                dxp[i] = s * dp[i];
                ds += static_cast<double>(dp[i]) * xp[i];
                db += dp[i];
            }
            r.dscale.data[static_cast<size_t>(n) * C + c] = static_cast<float>(ds);
            r.dbias.data[static_cast<size_t>(n) * C + c] = static_cast<float>(db);
        }
    return r;
}

// ---------------------------------------------------------------------------
// Losses and helpers

float mse_loss(const Tensor& pred, const Tensor& target, Tensor* dpred) {
    if (!pred.same_shape(target)) raise("mse_loss: shape mismatch");
    double s = 0.0;
    size_t n = pred.data.size();
    if (dpred) *dpred = Tensor(pred.shape);
    for (size_t i = 0; i < n; ++i) {
        float d = pred.data[i] - target.data[i];
        s += static_cast<double>(d) * d;
        if (dpred) dpred->data[i] = 2.0f * d / static_cast<float>(n);
    }
    return static_cast<float>(s / static_cast<double>(n));
}

Tensor softmax_rows(const Tensor& logits) {
    int N = logits.dim(0), K = logits.dim(1);
    Tensor p = logits;
    for (int n = 0; n < N; ++n) {
        float* row = p.ptr() + static_cast<size_t>(n) * K;
        float mx = *std::max_element(row, row + K);
        double s = 0.0;
        for (int k = 0; k < K; ++k) {
            row[k] = std::exp(row[k] - mx);
            s += row[k];
        }
        for (int k = 0; k < K; ++k) row[k] = static_cast<float>(row[k] / s);
    }
    return p;
}

float softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels, Tensor* dlogits) {
    int N = logits.dim(0), K = logits.dim(1);
    Tensor p = softmax_rows(logits);
    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
        float pl = p.data[static_cast<size_t>(n) * K + labels[static_cast<size_t>(n)]];
        loss -= std::log(std::max(pl, 1e-12f));
    }
    loss /= N;
    if (dlogits) {
        *dlogits = p;
        for (int n = 0; n < N; ++n) {
            dlogits->data[static_cast<size_t>(n) * K + labels[static_cast<size_t>(n)]] -= 1.0f;
        }
        for (auto& v : dlogits->data) v /= static_cast<float>(N);
    }
    return static_cast<float>(loss);
}

std::vector<float> sinusoidal_embedding(int t, int dim) {
    std::vector<float> e(static_cast<size_t>(dim), 0.0f);
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        e[static_cast<size_t>(i)] = static_cast<float>(std::sin(t * freq));
        e[static_cast<size_t>(half + i)] = static_cast<float>(std::cos(t * freq));
    }
    return e;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    int N = a.n(), Ca = a.c(), Cb = b.c(), H = a.h(), W = a.w();
    if (b.n() != N || b.h() != H || b.w() != W) raise("concat_channels: spatial mismatch");
    Tensor y({N, Ca + Cb, H, W});
    size_t hw = static_cast<size_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.ptr() + static_cast<size_t>(n) * Ca * hw, Ca * hw,
                    y.ptr() + static_cast<size_t>(n) * (Ca + Cb) * hw);
        std::copy_n(b.ptr() + static_cast<size_t>(n) * Cb * hw, Cb * hw,
                    y.ptr() + (static_cast<size_t>(n) * (Ca + Cb) + Ca) * hw);
    }
    return y;
}

void split_channels(const Tensor& d, int c_a, Tensor* da, Tensor* db) {
    int N = d.n(), C = d.c(), H = d.h(), W = d.w();
    int c_b = C - c_a;
    *da = Tensor({N, c_a, H, W});
    *db = Tensor({N, c_b, H, W});
    size_t hw = static_cast<size_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        std::copy_n(d.ptr() + static_cast<size_t>(n) * C * hw, c_a * hw,
                    da->ptr() + static_cast<size_t>(n) * c_a * hw);
        std::copy_n(d.ptr() + (static_cast<size_t>(n) * C + c_a) * hw, c_b * hw,
                    db->ptr() + static_cast<size_t>(n) * c_b * hw);
    }
}

}  // namespace retsyn::nn

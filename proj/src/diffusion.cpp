#include "retsyn/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace retsyn::diffusion {

DiffusionSchedule build_schedule(int timesteps, double beta_start, double beta_end) {
    if (timesteps < 2) throw ConfigError("build_schedule: need T >= 2");
    if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0))
        throw ConfigError("build_schedule: need 0 < beta_start < beta_end < 1");
    DiffusionSchedule s;
    s.timesteps = timesteps;
    s.beta.resize(static_cast<size_t>(timesteps));
    s.alpha.resize(static_cast<size_t>(timesteps));
    s.alpha_bar.resize(static_cast<size_t>(timesteps));
    double r0 = std::sqrt(beta_start), r1 = std::sqrt(beta_end);
    double acc = 1.0;
    for (int t = 0; t < timesteps; ++t) {
        double r = r0 + (static_cast<double>(t) / (timesteps - 1)) * (r1 - r0);
        s.beta[static_cast<size_t>(t)] = r * r;
        s.alpha[static_cast<size_t>(t)] = 1.0 - r * r;
        acc *= s.alpha[static_cast<size_t>(t)];
        s.alpha_bar[static_cast<size_t>(t)] = acc;
    }
    return s;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& epsilon, const DiffusionSchedule& s) {
    if (t < 0 || t >= s.timesteps) raise("q_sample: t out of range [0,T)");
    if (!x0.same_shape(epsilon)) raise("q_sample: epsilon shape mismatch");
    double ab = s.alpha_bar[static_cast<size_t>(t)];
    float c0 = static_cast<float>(std::sqrt(ab));
    float c1 = static_cast<float>(std::sqrt(1.0 - ab));
    Tensor y = x0;
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = c0 * x0.data[i] + c1 * epsilon.data[i];
    return y;
}

Tensor q_sample_batch(const Tensor& x0, const std::vector<int>& t, const Tensor& epsilon,
                      const DiffusionSchedule& s) {
    if (!x0.same_shape(epsilon)) raise("q_sample_batch: epsilon shape mismatch");
    int N = x0.n();
    size_t per = x0.data.size() / static_cast<size_t>(N);
    Tensor y = x0;
    for (int n = 0; n < N; ++n) {
        int tn = t[static_cast<size_t>(n)];
        if (tn < 0 || tn >= s.timesteps) raise("q_sample_batch: t out of range [0,T)");
        double ab = s.alpha_bar[static_cast<size_t>(tn)];
        float c0 = static_cast<float>(std::sqrt(ab));
        float c1 = static_cast<float>(std::sqrt(1.0 - ab));
        float* yp = y.ptr() + static_cast<size_t>(n) * per;
        const float* xp = x0.ptr() + static_cast<size_t>(n) * per;
        const float* ep = epsilon.ptr() + static_cast<size_t>(n) * per;
        for (size_t i = 0; i < per; ++i) yp[i] = c0 * xp[i] + c1 * ep[i];
    }
    return y;
}

namespace {

Tensor to_model_space(const Tensor& x01) {
    Tensor x = x01;
    for (auto& v : x.data) v = 2.0f * v - 1.0f;
    return x;
}

}  // namespace

float train_step(nn::CondUNet& model, nn::Adam& opt, const Tensor& batch01,
                 const std::vector<int>& labels, const DiffusionSchedule& sched, Rng& rng) {
    int N = batch01.n();
    Tensor x0 = to_model_space(batch01);
    std::vector<int> t(static_cast<size_t>(N));
    for (auto& ti : t) ti = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.timesteps)));
    Tensor eps(batch01.shape);
    for (auto& v : eps.data) v = static_cast<float>(rng.gaussian());

    Tensor xt = q_sample_batch(x0, t, eps, sched);
    Tensor pred = model.forward(xt, t, labels);
    Tensor dpred;
    float loss = nn::mse_loss(pred, eps, &dpred);
    if (!std::isfinite(loss))
        throw NumericalError("diffusion train_step: non-finite loss");
    opt.zero_grad();
    model.backward(dpred);
    opt.step();
    return loss;
}

double TrainCurve::early_average(int steps) const {
    int n = std::min<int>(steps, static_cast<int>(step_losses.size()));
    if (n == 0) return 0.0;
    return std::accumulate(step_losses.begin(), step_losses.begin() + n, 0.0) / n;
}

double TrainCurve::last_epoch_average(int steps_per_epoch) const {
    int n = std::min<int>(steps_per_epoch, static_cast<int>(step_losses.size()));
    if (n == 0) return 0.0;
    return std::accumulate(step_losses.end() - n, step_losses.end(), 0.0) / n;
}

TrainCurve train_ddpm(nn::CondUNet& model, const DdpmDataset& data, const DiffusionSchedule& sched,
                      const DdpmTrainConfig& cfg) {
    int N = data.images.n();
    if (N == 0) raise("train_ddpm: empty dataset");
    int H = data.images.h(), W = data.images.w();
    Rng rng = Rng::seeded(cfg.seed);
    nn::Adam opt(model.params(), static_cast<float>(cfg.lr));

    int steps_per_epoch = (N + cfg.batch_size - 1) / cfg.batch_size;
    int total_steps = steps_per_epoch * cfg.epochs;
    nn::CosineAnnealing sched_lr{static_cast<float>(cfg.lr), 0.0f, total_steps};

    TrainCurve curve;
    std::vector<int> order(static_cast<size_t>(N));
    std::iota(order.begin(), order.end(), 0);
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (int b = 0; b < steps_per_epoch; ++b) {
            int lo = b * cfg.batch_size;
            int hi = std::min(N, lo + cfg.batch_size);
            int bs = hi - lo;
            Tensor batch({bs, 1, H, W});
            std::vector<int> labels(static_cast<size_t>(bs));
            for (int k = 0; k < bs; ++k) {
                int idx = order[static_cast<size_t>(lo + k)];
                std::copy_n(data.images.ptr() + static_cast<size_t>(idx) * H * W,
                            static_cast<size_t>(H) * W,
                            batch.ptr() + static_cast<size_t>(k) * H * W);
                labels[static_cast<size_t>(k)] = data.labels[static_cast<size_t>(idx)];
            }
            opt.lr = sched_lr.at(step);
            curve.step_losses.push_back(train_step(model, opt, batch, labels, sched, rng));
            ++step;
        }
    }
    return curve;
}

std::vector<Image> sample(const NoisePredictor& predict, const DiffusionSchedule& sched,
                          int class_label, int n, int side, Rng& rng) {
    std::vector<Image> out;
    if (n == 0) return out;
    // Per-image noise streams derive from one salt so the batch is
    // reproducible for a given rng state and safe to regenerate per image.
    uint64_t salt = rng.next_u64();
    std::vector<Rng> streams;
    streams.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        streams.push_back(Rng::seeded(salt ^ (0x9e3779b97f4a7c15ull * (static_cast<uint64_t>(i) + 1))));

    int T = sched.timesteps;
    size_t per = static_cast<size_t>(side) * side;
    Tensor x({n, 1, side, side});
    for (int i = 0; i < n; ++i) {
        float* p = x.ptr() + static_cast<size_t>(i) * per;
        for (size_t k = 0; k < per; ++k) p[k] = static_cast<float>(streams[static_cast<size_t>(i)].gaussian());
    }

    std::vector<int> labels(static_cast<size_t>(n), class_label);
    std::vector<int> ts(static_cast<size_t>(n));
    for (int t = T - 1; t >= 0; --t) {
        std::fill(ts.begin(), ts.end(), t);
        Tensor eps = predict(x, ts, labels);
        double beta = sched.beta[static_cast<size_t>(t)];
        double alpha = sched.alpha[static_cast<size_t>(t)];
        double ab = sched.alpha_bar[static_cast<size_t>(t)];
        float k_eps = static_cast<float>(beta / std::sqrt(1.0 - ab));
        float k_mean = static_cast<float>(1.0 / std::sqrt(alpha));
        float sigma = 0.0f;
        if (t > 0) {
            double ab_prev = sched.alpha_bar[static_cast<size_t>(t - 1)];
            sigma = static_cast<float>(std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)));
        }
        for (int i = 0; i < n; ++i) {
            float* xp = x.ptr() + static_cast<size_t>(i) * per;
            const float* ep = eps.ptr() + static_cast<size_t>(i) * per;
            Rng& st = streams[static_cast<size_t>(i)];
            for (size_t k = 0; k < per; ++k) {
                float mean = k_mean * (xp[k] - k_eps * ep[k]);
                xp[k] = (t > 0) ? mean + sigma * static_cast<float>(st.gaussian()) : mean;
            }
        }
    }

    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Image img(side, side);
        const float* p = x.ptr() + static_cast<size_t>(i) * per;
        for (size_t k = 0; k < per; ++k) {
            float v = 0.5f * (p[k] + 1.0f);
            img.pix[k] = std::min(1.0f, std::max(0.0f, v));
        }
        out.push_back(std::move(img));
    }
    return out;
}

NoisePredictor predictor_for(nn::CondUNet& model) {
    return [&model](const Tensor& x_t, const std::vector<int>& t, const std::vector<int>& labels) {
        return model.forward(x_t, t, labels);
    };
}

}  // namespace retsyn::diffusion

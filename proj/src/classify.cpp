#include "retsyn/classify.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "retsyn/nn/optim.hpp"

namespace retsyn::classify {

std::string to_string(TrainRegime r) {
    switch (r) {
        case TrainRegime::REAL_ONLY: return "real";
        case TrainRegime::SYNTH_ONLY: return "synth";
        default: return "pretrained";
    }
}

TrainRegime regime_from_string(const std::string& s) {
    if (s == "real") return TrainRegime::REAL_ONLY;
    if (s == "synth") return TrainRegime::SYNTH_ONLY;
    if (s == "pretrain" || s == "pretrained") return TrainRegime::PRETRAIN_FINETUNE;
    throw ConfigError("unknown regime: " + s);
}

double focal_loss(const std::vector<double>& p, const std::vector<int>& y, double gamma,
                  double alpha, std::vector<double>* dp) {
    if (p.size() != y.size() || p.empty()) raise("focal_loss: size mismatch");
    if (gamma < 0.0) throw ConfigError("focal_loss: gamma must be >= 0");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("focal_loss: alpha must lie in (0,1]");
    constexpr double kEps = 1e-7;
    if (dp) dp->assign(p.size(), 0.0);
    double total = 0.0;
    double n = static_cast<double>(p.size());
    for (size_t i = 0; i < p.size(); ++i) {
        if (!(p[i] >= 0.0 && p[i] <= 1.0))
            throw NumericalError("focal_loss: probability outside (0,1)");
        double pc = std::min(1.0 - kEps, std::max(kEps, p[i]));
        double pt = y[i] == 1 ? pc : 1.0 - pc;
        double one_m = 1.0 - pt;
        total += -alpha * std::pow(one_m, gamma) * std::log(pt);
        if (dp) {
            double g = -alpha * (std::pow(one_m, gamma) / pt -
                                 (gamma > 0.0 ? gamma * std::pow(one_m, gamma - 1.0) * std::log(pt)
                                              : 0.0));
            (*dp)[i] = (y[i] == 1 ? g : -g) / n;
        }
    }
    return total / n;
}

std::vector<double> sampler_weights(const std::vector<int>& labels) {
    if (labels.empty()) raise("sampler_weights: empty labels");
    double n1 = 0.0, n0 = 0.0;
    for (int y : labels) (y == 1 ? n1 : n0) += 1.0;
    if (n1 == 0.0 || n0 == 0.0)
        raise("sampler_weights: both classes must be present in the training set");
    std::vector<double> w(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) w[i] = 1.0 / (labels[i] == 1 ? n1 : n0);
    return w;
}

// ---------------------------------------------------------------------------

namespace {

size_t weighted_pick(const std::vector<double>& cumulative, Rng& rng) {
    double r = rng.uniform() * cumulative.back();
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    size_t i = static_cast<size_t>(it - cumulative.begin());
    return std::min(i, cumulative.size() - 1);
}

std::vector<double> sigmoid_vec(const Tensor& logits) {
    std::vector<double> p(logits.data.size());
    for (size_t i = 0; i < p.size(); ++i) p[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.data[i])));
    return p;
}

// One epoch of weighted-replacement sampling with focal loss on p_neg.
void run_epoch(nn::Backbone& net, nn::Adam& opt, const LabeledImages& data,
               const std::vector<double>& cumulative, const ClassifierTrainConfig& cfg, Rng& rng) {
    int n = static_cast<int>(data.size());
    int channels = net.config().in_channels;
    int steps = (n + cfg.batch_size - 1) / cfg.batch_size;
    for (int b = 0; b < steps; ++b) {
        int bs = std::min(cfg.batch_size, n);
        int side = data.images[0].height;
        Tensor x({bs, channels, side, side});
        std::vector<int> y_neg(static_cast<size_t>(bs));
        for (int k = 0; k < bs; ++k) {
            size_t idx = weighted_pick(cumulative, rng);
            Image img = data.images[idx];
            if (cfg.augment_enabled) {
                Rng arng(rng.next_u64());
                img = dataman::augment(img, cfg.modality, cfg.augment, arng);
            }
            dataman::fill_tensor_channels(img, x, k, channels);
            y_neg[static_cast<size_t>(k)] = data.y_pos[idx] == 1 ? 0 : 1;
        }
        net.set_training(true);
        Tensor logits = net.forward(x);
        std::vector<double> p = sigmoid_vec(logits);
        std::vector<double> dp;
        double loss = focal_loss(p, y_neg, cfg.focal_gamma, cfg.focal_alpha, &dp);
        if (!std::isfinite(loss)) throw NumericalError("train_unimodal: non-finite loss");
        Tensor dlogit = logits;
        for (size_t i = 0; i < dp.size(); ++i)
            dlogit.data[i] = static_cast<float>(dp[i] * p[i] * (1.0 - p[i]));
        opt.zero_grad();
        net.backward(dlogit);
        opt.step();
    }
}

double val_focal_loss(nn::Backbone& net, const LabeledImages& val,
                      const ClassifierTrainConfig& cfg) {
    std::vector<double> p = predict_p_neg(net, val.images);
    std::vector<int> y_neg(val.size());
    for (size_t i = 0; i < val.size(); ++i) y_neg[i] = val.y_pos[i] == 1 ? 0 : 1;
    return focal_loss(p, y_neg, cfg.focal_gamma, cfg.focal_alpha);
}

struct Phase {
    const LabeledImages* data;
    int epochs;
};

}  // namespace

std::vector<double> predict_p_neg(nn::Backbone& net, const std::vector<Image>& images) {
    net.set_training(false);
    int channels = net.config().in_channels;
    std::vector<double> out;
    out.reserve(images.size());
    const int chunk = 32;
    for (size_t lo = 0; lo < images.size(); lo += chunk) {
        size_t hi = std::min(images.size(), lo + chunk);
        int side = images[lo].height;
        Tensor x({static_cast<int>(hi - lo), channels, side, side});
        for (size_t k = lo; k < hi; ++k)
            dataman::fill_tensor_channels(images[k], x, static_cast<int>(k - lo), channels);
        Tensor logits = net.forward(x);
        for (float v : logits.data) out.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
    }
    return out;
}

evalkit::MetricsReport metrics_from_p_neg(const std::vector<double>& p_neg,
                                          const std::vector<int>& y_pos) {
    std::vector<double> p_pos(p_neg.size());
    for (size_t i = 0; i < p_neg.size(); ++i) p_pos[i] = 1.0 - p_neg[i];
    return evalkit::compute_binary_metrics(p_pos, y_pos);
}

UnimodalResult train_unimodal(const LabeledImages& train_real, const LabeledImages& val,
                              TrainRegime regime, const LabeledImages* synth,
                              const ClassifierTrainConfig& cfg) {
    if (val.size() == 0) raise("train_unimodal: empty validation set");
    bool needs_synth = regime != TrainRegime::REAL_ONLY;
    if (needs_synth && (!synth || synth->size() == 0))
        throw MissingArtifactError("train_unimodal: regime '" + to_string(regime) +
                                   "' needs a gated synthetic pool");

    UnimodalResult res;
    nn::BackboneConfig bc = cfg.backbone;
    bc.num_outputs = 1;
    res.net = nn::make_backbone(bc, cfg.seed);
    Rng rng = Rng::seeded(cfg.seed);

    std::vector<Phase> phases;
    switch (regime) {
        case TrainRegime::REAL_ONLY: phases = {{&train_real, cfg.epochs}}; break;
        case TrainRegime::SYNTH_ONLY: phases = {{synth, cfg.epochs}}; break;
        case TrainRegime::PRETRAIN_FINETUNE:
            phases = {{synth, cfg.epochs}, {&train_real, cfg.epochs}};
            break;
    }

    auto params = res.net->params();
    std::vector<std::vector<float>> best;
    int global_epoch = 0;
    for (size_t phase_i = 0; phase_i < phases.size(); ++phase_i) {
        const auto& phase = phases[phase_i];
        if (phase.data->size() == 0) raise("train_unimodal: empty training phase");
        auto weights = sampler_weights(phase.data->y_pos);
        std::vector<double> cumulative(weights.size());
        std::partial_sum(weights.begin(), weights.end(), cumulative.begin());

        nn::Adam opt(params, static_cast<float>(cfg.lr));
        nn::StepLR sched{static_cast<float>(cfg.lr), cfg.lr_step, static_cast<float>(cfg.lr_gamma)};

        double best_loss = 1e30;
        int best_epoch_phase = -1, since_best = 0;
        std::vector<std::vector<float>> phase_best;
        for (int epoch = 0; epoch < phase.epochs; ++epoch, ++global_epoch) {
            opt.lr = sched.at(epoch);
            run_epoch(*res.net, opt, *phase.data, cumulative, cfg, rng);
            double vloss = val_focal_loss(*res.net, val, cfg);
            res.val_losses.push_back(vloss);
            ++res.epochs_ran;
            if (vloss < best_loss) {
                best_loss = vloss;
                best_epoch_phase = epoch;
                since_best = 0;
                phase_best.clear();
                for (auto* p : params) phase_best.push_back(p->w);
            } else if (++since_best >= cfg.patience) {
                break;
            }
        }
        // resume / finish from the best epoch of this phase
        if (!phase_best.empty())
            for (size_t i = 0; i < params.size(); ++i) params[i]->w = phase_best[i];
        if (phase_i + 1 == phases.size()) {
            res.best_epoch = best_epoch_phase;
            best = std::move(phase_best);
        }
    }
    (void)best;

    std::vector<double> val_p = predict_p_neg(*res.net, val.images);
    res.val_metrics = metrics_from_p_neg(val_p, val.y_pos);
    res.val_metrics.split = "val";
    res.val_metrics.regime = to_string(regime);
    return res;
}

// ---------------------------------------------------------------------------
// Fusion

void save_predictions(const std::string& path, const std::string& modality,
                      const std::vector<std::string>& eye_ids, const std::vector<double>& p_neg,
                      const std::vector<int>& y_pos) {
    std::ofstream f(path);
    if (!f) raise("cannot write predictions: " + path);
    for (size_t i = 0; i < eye_ids.size(); ++i) {
        f << eye_ids[i] << '\t' << modality << '\t' << p_neg[i] << '\t'
          << (y_pos[i] == 1 ? "POS" : "NEG") << '\n';
    }
}

FusionModel::FusionModel(const FusionConfig& config, uint64_t seed) : cfg(config) {
    if (cfg.hidden.size() != 2) throw ConfigError("fusion head expects two hidden widths");
    Rng rng = Rng::seeded(seed);
    int in = input_width();
    fc1 = nn::Linear("fusion.fc1", in, cfg.hidden[0], rng);
    fc2 = nn::Linear("fusion.fc2", cfg.hidden[0], cfg.hidden[1], rng);
    fc3 = nn::Linear("fusion.fc3", cfg.hidden[1], 1, rng);
}

int FusionModel::input_width() const {
    return static_cast<int>(cfg.modalities.size()) + (cfg.use_metadata ? 2 : 0);
}

Tensor FusionModel::forward(const Tensor& x) {
    return fc3.forward(a2.forward(fc2.forward(a1.forward(fc1.forward(x)))));
}

void FusionModel::backward(const Tensor& dlogit) {
    fc1.backward(a1.backward(fc2.backward(a2.backward(fc3.backward(dlogit)))));
}

void FusionModel::collect(std::vector<nn::Param*>& out) {
    fc1.collect(out);
    fc2.collect(out);
    fc3.collect(out);
}

Tensor FusionModel::features_of(const std::vector<PredictionRecord>& recs) const {
    int d = input_width();
    Tensor x({static_cast<int>(recs.size()), d});
    for (size_t i = 0; i < recs.size(); ++i) {
        float* row = x.ptr() + i * static_cast<size_t>(d);
        int col = 0;
        for (const auto& m : cfg.modalities) {
            auto it = recs[i].p_neg.find(m);
            if (it == recs[i].p_neg.end())
                raise("fusion: eye " + recs[i].eye_id + " is missing a score for " + m);
            row[col++] = static_cast<float>(it->second);
        }
        if (cfg.use_metadata) {
            if (recs[i].metadata.size() != 2)
                raise("fusion: eye " + recs[i].eye_id + " lacks encoded metadata");
            row[col++] = static_cast<float>(recs[i].metadata[0]);
            row[col++] = static_cast<float>(recs[i].metadata[1]);
        }
    }
    return x;
}

std::vector<double> FusionModel::predict_p_neg(const std::vector<PredictionRecord>& recs) {
    Tensor logits = forward(features_of(recs));
    std::vector<double> p(logits.data.size());
    for (size_t i = 0; i < p.size(); ++i) p[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.data[i])));
    return p;
}

FusionResult train_multimodal(const std::vector<PredictionRecord>& train,
                              const std::vector<PredictionRecord>& val, const FusionConfig& cfg) {
    if (train.empty() || val.empty()) raise("train_multimodal: empty prediction sets");
    FusionResult res;
    res.model = FusionModel(cfg, cfg.seed);
    Tensor x_all = res.model.features_of(train);  // validates completeness up front
    (void)res.model.features_of(val);

    std::vector<int> y_pos(train.size());
    for (size_t i = 0; i < train.size(); ++i) y_pos[i] = train[i].y_pos;
    auto weights = sampler_weights(y_pos);
    std::vector<double> cumulative(weights.size());
    std::partial_sum(weights.begin(), weights.end(), cumulative.begin());

    Rng rng = Rng::seeded(cfg.seed);
    nn::Adam opt(res.model.params(), static_cast<float>(cfg.lr));
    int n = static_cast<int>(train.size());
    int d = res.model.input_width();
    int steps = (n + cfg.batch_size - 1) / cfg.batch_size;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int b = 0; b < steps; ++b) {
            int bs = std::min(cfg.batch_size, n);
            Tensor x({bs, d});
            std::vector<int> y_neg(static_cast<size_t>(bs));
            for (int k = 0; k < bs; ++k) {
                size_t idx = weighted_pick(cumulative, rng);
                std::copy_n(x_all.ptr() + idx * static_cast<size_t>(d), d,
                            x.ptr() + static_cast<size_t>(k) * d);
                y_neg[static_cast<size_t>(k)] = train[idx].y_pos == 1 ? 0 : 1;
            }
            Tensor logits = res.model.forward(x);
            std::vector<double> p = sigmoid_vec(logits);
            std::vector<double> dp;
            double loss = focal_loss(p, y_neg, cfg.focal_gamma, cfg.focal_alpha, &dp);
            if (!std::isfinite(loss)) throw NumericalError("train_multimodal: non-finite loss");
            Tensor dlogit = logits;
            for (size_t i = 0; i < dp.size(); ++i)
                dlogit.data[i] = static_cast<float>(dp[i] * p[i] * (1.0 - p[i]));
            opt.zero_grad();
            res.model.backward(dlogit);
            opt.step();
        }
    }
    // last-epoch checkpoint by contract
    std::vector<double> vp = res.model.predict_p_neg(val);
    std::vector<int> vy(val.size());
    for (size_t i = 0; i < val.size(); ++i) vy[i] = val[i].y_pos;
    res.val_metrics = metrics_from_p_neg(vp, vy);
    res.val_metrics.split = "val";
    return res;
}

}  // namespace retsyn::classify

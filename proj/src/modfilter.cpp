#include "retsyn/modfilter.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "retsyn/nn/checkpoint.hpp"
#include "retsyn/nn/optim.hpp"

namespace retsyn::modfilter {

using nlohmann::json;

double mcc_multiclass(const std::vector<std::vector<double>>& confusion) {
    size_t k = confusion.size();
    if (k == 0) raise("mcc_multiclass: empty confusion matrix");
    double s = 0.0, c = 0.0;
    std::vector<double> truth(k, 0.0), pred(k, 0.0);
    for (size_t i = 0; i < k; ++i) {
        if (confusion[i].size() != k) raise("mcc_multiclass: matrix must be square");
        for (size_t j = 0; j < k; ++j) {
            double v = confusion[i][j];
            if (v < 0.0) raise("mcc_multiclass: negative count");
            s += v;
            truth[i] += v;
            pred[j] += v;
        }
        c += confusion[i][i];
    }
    if (s == 0.0) raise("mcc_multiclass: all counts zero");
    double cov_xy = c * s;
    double sum_tp = 0.0, sum_pp = 0.0, sum_tt = 0.0;
    for (size_t i = 0; i < k; ++i) {
        sum_tp += truth[i] * pred[i];
        sum_pp += pred[i] * pred[i];
        sum_tt += truth[i] * truth[i];
    }
    cov_xy -= sum_tp;
    double cov_xx = s * s - sum_pp;
    double cov_yy = s * s - sum_tt;
    if (cov_xx <= 0.0 || cov_yy <= 0.0) return 0.0;
    return cov_xy / std::sqrt(cov_xx * cov_yy);
}

// ---------------------------------------------------------------------------

namespace {

Tensor batch_tensor(const std::vector<Image>& images, const std::vector<int>& idx, int lo, int hi,
                    int channels) {
    int side = images[static_cast<size_t>(idx[static_cast<size_t>(lo)])].height;
    Tensor t({hi - lo, channels, side, side});
    for (int k = lo; k < hi; ++k)
        dataman::fill_tensor_channels(images[static_cast<size_t>(idx[static_cast<size_t>(k)])], t,
                                      k - lo, channels);
    return t;
}

struct EvalCounts {
    std::vector<std::vector<double>> confusion;
    std::vector<PerClassPrf> prf;
    double mcc = 0.0;
};

EvalCounts evaluate_filter(FilterModel& model, const ModalityDataset& ds) {
    size_t k = model.classes.size();
    EvalCounts ec;
    ec.confusion.assign(k, std::vector<double>(k, 0.0));
    if (ds.images.empty()) return ec;
    Tensor probs = model.predict_probs(ds.images);
    for (size_t i = 0; i < ds.images.size(); ++i) {
        const float* row = probs.ptr() + i * k;
        size_t arg = static_cast<size_t>(std::max_element(row, row + k) - row);
        ec.confusion[static_cast<size_t>(ds.modality_idx[i])][arg] += 1.0;
    }
    ec.mcc = mcc_multiclass(ec.confusion);
    for (size_t i = 0; i < k; ++i) {
        PerClassPrf p;
        p.modality = model.classes[i];
        double tp = ec.confusion[i][i];
        double support = std::accumulate(ec.confusion[i].begin(), ec.confusion[i].end(), 0.0);
        double predicted = 0.0;
        for (size_t r = 0; r < k; ++r) predicted += ec.confusion[r][i];
        p.support = static_cast<int>(support);
        p.recall = support > 0.0 ? tp / support : 0.0;
        p.precision = predicted > 0.0 ? tp / predicted : 0.0;
        p.f1 = (p.precision + p.recall) > 0.0
                   ? 2.0 * p.precision * p.recall / (p.precision + p.recall)
                   : 0.0;
        ec.prf.push_back(std::move(p));
    }
    return ec;
}

}  // namespace

Tensor FilterModel::predict_probs(const std::vector<Image>& images) {
    size_t k = classes.size();
    Tensor out({static_cast<int>(images.size()), static_cast<int>(k)});
    net->set_training(false);
    std::vector<int> idx(images.size());
    std::iota(idx.begin(), idx.end(), 0);
    const int chunk = 32;
    for (int lo = 0; lo < static_cast<int>(images.size()); lo += chunk) {
        int hi = std::min<int>(static_cast<int>(images.size()), lo + chunk);
        Tensor x = batch_tensor(images, idx, lo, hi, net->config().in_channels);
        Tensor logits = net->forward(x);
        Tensor probs = nn::softmax_rows(logits);
        std::copy_n(probs.ptr(), probs.data.size(), out.ptr() + static_cast<size_t>(lo) * k);
    }
    return out;
}

Tensor FilterModel::embed(const std::vector<Image>& images) {
    net->set_training(false);
    Tensor out({static_cast<int>(images.size()), net->embed_dim()});
    std::vector<int> idx(images.size());
    std::iota(idx.begin(), idx.end(), 0);
    const int chunk = 32;
    for (int lo = 0; lo < static_cast<int>(images.size()); lo += chunk) {
        int hi = std::min<int>(static_cast<int>(images.size()), lo + chunk);
        Tensor x = batch_tensor(images, idx, lo, hi, net->config().in_channels);
        net->forward(x);
        const Tensor& p = net->pooled_embedding();
        std::copy_n(p.ptr(), p.data.size(),
                    out.ptr() + static_cast<size_t>(lo) * net->embed_dim());
    }
    return out;
}

int FilterModel::class_index(const std::string& modality) const {
    auto it = std::find(classes.begin(), classes.end(), modality);
    if (it == classes.end()) raise("filter does not know modality: " + modality);
    return static_cast<int>(it - classes.begin());
}

TrainedFilter train_filter(const ModalityDataset& train, const ModalityDataset& val,
                           const ModalityDataset& test, const FilterTrainConfig& cfg) {
    if (train.classes.size() < 2)
        raise("train_filter: manifest must span at least 2 modalities");
    // every modality needs at least one training image
    std::vector<int> counts(train.classes.size(), 0);
    for (int m : train.modality_idx) counts[static_cast<size_t>(m)]++;
    for (size_t k = 0; k < counts.size(); ++k)
        if (counts[k] == 0)
            raise("train_filter: modality has zero training images: " + train.classes[k]);
    if (train.images.empty()) raise("train_filter: empty training set");

    TrainedFilter tf;
    tf.model.classes = train.classes;
    tf.model.side = train.images[0].height;
    nn::BackboneConfig bc = cfg.backbone;
    bc.num_outputs = static_cast<int>(train.classes.size());
    tf.model.net = nn::make_backbone(bc, cfg.seed);
    if (!cfg.init_checkpoint.empty()) {
        auto params = tf.model.net->params();
        nn::load_checkpoint(cfg.init_checkpoint, params);
    }

    Rng rng = Rng::seeded(cfg.seed);
    nn::Adam opt(tf.model.net->params(), static_cast<float>(cfg.lr),
                 static_cast<float>(cfg.weight_decay));

    int n = static_cast<int>(train.images.size());
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    int channels = bc.in_channels;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        tf.model.net->set_training(true);
        rng.shuffle(order);
        for (int lo = 0; lo < n; lo += cfg.batch_size) {
            int hi = std::min(n, lo + cfg.batch_size);
            Tensor x = batch_tensor(train.images, order, lo, hi, channels);
            std::vector<int> labels;
            for (int k = lo; k < hi; ++k)
                labels.push_back(train.modality_idx[static_cast<size_t>(order[static_cast<size_t>(k)])]);
            Tensor logits = tf.model.net->forward(x);
            Tensor dlogits;
            float loss = nn::softmax_cross_entropy(logits, labels, &dlogits);
            if (!std::isfinite(loss)) throw NumericalError("train_filter: non-finite loss");
            opt.zero_grad();
            tf.model.net->backward(dlogits);
            opt.step();
        }
    }

    EvalCounts vc = evaluate_filter(tf.model, val);
    EvalCounts tc = evaluate_filter(tf.model, test);
    tf.report.val_prf = vc.prf;
    tf.report.test_prf = tc.prf;
    tf.report.mcc_val = vc.mcc;
    tf.report.mcc_test = tc.mcc;
    tf.report.confusion_val = vc.confusion;
    tf.report.confusion_test = tc.confusion;
    return tf;
}

json FilterReport::to_json() const {
    auto prf_json = [](const std::vector<PerClassPrf>& v) {
        json a = json::array();
        for (const auto& p : v)
            a.push_back({{"modality", p.modality},
                         {"precision", p.precision},
                         {"recall", p.recall},
                         {"f1", p.f1},
                         {"support", p.support}});
        return a;
    };
    return json{{"mcc_val", mcc_val},
                {"mcc_test", mcc_test},
                {"val", prf_json(val_prf)},
                {"test", prf_json(test_prf)},
                {"confusion_val", confusion_val},
                {"confusion_test", confusion_test}};
}

GateResult gate_synthetic(const std::vector<GateItem>& stream, FilterModel& model,
                          const GateConfig& gate) {
    GateResult out;
    if (stream.empty()) return out;

    std::vector<Image> imgs;
    imgs.reserve(stream.size());
    for (const auto& it : stream) {
        if (!it.image) raise("gate_synthetic: null image in stream");
        imgs.push_back(*it.image);
    }
    Tensor probs = model.predict_probs(imgs);
    size_t k = model.classes.size();

    std::map<std::pair<std::string, int>, int> used;
    for (size_t i = 0; i < stream.size(); ++i) {
        const auto& item = stream[i];
        const float* row = probs.ptr() + i * k;
        size_t arg = static_cast<size_t>(std::max_element(row, row + k) - row);
        FilterDecision d;
        d.image_id = item.id;
        d.generation_modality = item.modality;
        d.predicted_modality = model.classes[arg];
        d.confidence_predicted = row[arg];
        auto th = gate.thresholds.find(item.modality);
        d.threshold_used = th == gate.thresholds.end() ? 0.0 : th->second;

        if (d.predicted_modality != item.modality) {
            d.accepted = false;
            d.reason = "wrong_modality";
        } else if (d.confidence_predicted < d.threshold_used) {
            d.accepted = false;
            d.reason = "low_confidence";
        } else {
            auto key = std::make_pair(item.modality, static_cast<int>(item.label));
            if (used[key] >= gate.budget_per_class) {
                d.accepted = false;
                d.reason = "budget";
            } else {
                d.accepted = true;
                d.reason = "pass";
                ++used[key];
                out.accepted.push_back(i);
            }
        }
        out.decisions.push_back(std::move(d));
    }
    return out;
}

void save_rejection_log(const std::string& path, const std::vector<FilterDecision>& decisions) {
    std::ofstream f(path);
    if (!f) raise("cannot write rejection log: " + path);
    for (const auto& d : decisions) {
        f << d.image_id << '\t' << d.generation_modality << '\t' << d.predicted_modality << '\t'
          << d.confidence_predicted << '\t' << (d.accepted ? "accept" : "reject") << '\t'
          << d.reason << '\n';
    }
}

}  // namespace retsyn::modfilter

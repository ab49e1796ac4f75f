#include "retsyn/evalkit.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

namespace retsyn::evalkit {

using nlohmann::json;

double pearsonr(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) raise("pearsonr: length mismatch");
    size_t n = a.size();
    if (n < 2) raise("pearsonr: need at least 2 elements");
    double ma = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(n);
    double mb = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(n);
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double da = a[i] - ma, db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va == 0.0 || vb == 0.0) throw NumericalError("pearsonr: zero-variance input");
    return cov / std::sqrt(va * vb);
}

namespace {

// Rows are mean-centered and scaled to unit norm so correlations reduce to
// dot products; the all-pairs pass is then a single GEMM.
Eigen::MatrixXd normalize_rows(const std::vector<std::vector<double>>& set, const char* tag) {
    if (set.empty()) raise(std::string(tag) + ": empty set");
    size_t d = set[0].size();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(set.size()), static_cast<Eigen::Index>(d));
    for (size_t i = 0; i < set.size(); ++i) {
        if (set[i].size() != d) raise(std::string(tag) + ": ragged set");
        double mean = std::accumulate(set[i].begin(), set[i].end(), 0.0) / static_cast<double>(d);
        double ss = 0.0;
        for (size_t j = 0; j < d; ++j) {
            double v = set[i][j] - mean;
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
            ss += v * v;
        }
        if (ss == 0.0)
            throw NumericalError(std::string(tag) + ": zero-variance image at index " +
                                 std::to_string(i));
        m.row(static_cast<Eigen::Index>(i)) /= std::sqrt(ss);
    }
    return m;
}

}  // namespace

std::vector<double> max_corr_distribution(const std::vector<std::vector<double>>& set_a,
                                          const std::vector<std::vector<double>>& set_b,
                                          bool exclude_self) {
    if (set_b.empty()) raise("max_corr_distribution: set B must be nonempty");
    if (exclude_self) {
        if (set_a.size() != set_b.size())
            raise("max_corr_distribution: within-set mode requires identical sets");
        if (set_b.size() < 2) raise("max_corr_distribution: within-set mode needs |B| >= 2");
    }
    Eigen::MatrixXd a = normalize_rows(set_a, "max_corr set A");
    Eigen::MatrixXd b = normalize_rows(set_b, "max_corr set B");
    if (a.cols() != b.cols()) raise("max_corr_distribution: image size mismatch");

    Eigen::MatrixXd corr = a * b.transpose();
    std::vector<double> out(set_a.size(), -2.0);
    for (Eigen::Index i = 0; i < corr.rows(); ++i) {
        double best = -2.0;
        for (Eigen::Index j = 0; j < corr.cols(); ++j) {
            if (exclude_self && i == j) continue;
            best = std::max(best, corr(i, j));
        }
        out[static_cast<size_t>(i)] = std::min(1.0, std::max(-1.0, best));
    }
    return out;
}

double wasserstein_1d(const std::vector<double>& u, const std::vector<double>& v) {
    if (u.empty() || v.empty()) raise("wasserstein_1d: empty input");
    std::vector<double> su = u, sv = v;
    std::sort(su.begin(), su.end());
    std::sort(sv.begin(), sv.end());
    // Walk the pooled support, integrating |F_u - F_v| over each gap.
    size_t i = 0, j = 0;
    double w = 0.0, prev = 0.0;
    bool have_prev = false;
    while (i < su.size() || j < sv.size()) {
        double x;
        if (i < su.size() && (j >= sv.size() || su[i] <= sv[j])) x = su[i];
        else x = sv[j];
        if (have_prev && x > prev) {
            double fu = static_cast<double>(i) / static_cast<double>(su.size());
            double fv = static_cast<double>(j) / static_cast<double>(sv.size());
            w += std::abs(fu - fv) * (x - prev);
        }
        while (i < su.size() && su[i] == x) ++i;
        while (j < sv.size() && sv[j] == x) ++j;
        prev = x;
        have_prev = true;
    }
    return w;
}

double kolmogorov_q(double lambda) {
    if (lambda <= 1e-8) return 1.0;
    double sum = 0.0, sign = 1.0;
    double l2 = lambda * lambda;
    for (int j = 1; j <= 1000; ++j) {
        double term = sign * 2.0 * std::exp(-2.0 * j * j * l2);
        sum += term;
        if (std::abs(term) < 1e-16 * std::abs(sum) || std::abs(term) < 1e-300) break;
        sign = -sign;
    }
    return std::min(1.0, std::max(0.0, sum));
}

KsResult ks_two_sample(const std::vector<double>& u, const std::vector<double>& v) {
    if (u.empty() || v.empty()) raise("ks_two_sample: empty input");
    std::vector<double> su = u, sv = v;
    std::sort(su.begin(), su.end());
    std::sort(sv.begin(), sv.end());
    size_t i = 0, j = 0;
    double d = 0.0;
    while (i < su.size() || j < sv.size()) {
        double x;
        if (i < su.size() && (j >= sv.size() || su[i] <= sv[j])) x = su[i];
        else x = sv[j];
        while (i < su.size() && su[i] == x) ++i;
        while (j < sv.size() && sv[j] == x) ++j;
        double fu = static_cast<double>(i) / static_cast<double>(su.size());
        double fv = static_cast<double>(j) / static_cast<double>(sv.size());
        d = std::max(d, std::abs(fu - fv));
    }
    double n = static_cast<double>(su.size()), m = static_cast<double>(sv.size());
    double en = std::sqrt(n * m / (n + m));
    KsResult r;
    r.statistic = d;
    r.p_value = kolmogorov_q(en * d);
    return r;
}

namespace {

void check_both_classes(const std::vector<int>& labels, const char* tag) {
    bool has0 = false, has1 = false;
    for (int y : labels) {
        if (y == 1) has1 = true;
        else has0 = true;
    }
    if (!has0 || !has1) raise(std::string(tag) + ": both classes must be present");
}

}  // namespace

RocPr roc_pr_areas(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) raise("roc_pr_areas: length mismatch");
    check_both_classes(labels, "roc_pr_areas");
    size_t n = scores.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    double pos = 0.0, neg = 0.0;
    for (int y : labels) (y == 1 ? pos : neg) += 1.0;

    double tp = 0.0, fp = 0.0;
    double prev_tpr = 0.0, prev_fpr = 0.0, prev_recall = 0.0;
    double auroc = 0.0, aupr = 0.0;
    size_t i = 0;
    while (i < n) {
        double s = scores[order[i]];
        while (i < n && scores[order[i]] == s) {
            if (labels[order[i]] == 1) tp += 1.0;
            else fp += 1.0;
            ++i;
        }
        double tpr = tp / pos, fpr = fp / neg;
        auroc += (fpr - prev_fpr) * (tpr + prev_tpr) * 0.5;
        double precision = tp / (tp + fp);
        aupr += (tpr - prev_recall) * precision;  // step interpolation
        prev_tpr = tpr;
        prev_fpr = fpr;
        prev_recall = tpr;
    }
    return {auroc, aupr};
}

YoudenResult youden_confusion(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) raise("youden_confusion: length mismatch");
    check_both_classes(labels, "youden_confusion");

    std::vector<double> uniq = scores;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

    std::vector<double> cuts;
    cuts.push_back(uniq.front() - 1.0);  // everything positive
    for (size_t i = 1; i < uniq.size(); ++i) cuts.push_back(0.5 * (uniq[i - 1] + uniq[i]));
    cuts.push_back(uniq.back() + 1.0);  // everything negative

    double pos = 0.0, neg = 0.0;
    for (int y : labels) (y == 1 ? pos : neg) += 1.0;

    YoudenResult best;
    best.youden_j = -2.0;
    for (double cut : cuts) {
        double tp = 0.0, fp = 0.0;
        for (size_t i = 0; i < scores.size(); ++i) {
            if (scores[i] > cut) {
                if (labels[i] == 1) tp += 1.0;
                else fp += 1.0;
            }
        }
        double sens = tp / pos;
        double spec = (neg - fp) / neg;
        double j = sens + spec - 1.0;
        if (j > best.youden_j) {
            best.youden_j = j;
            best.threshold = cut;
            best.sensitivity = sens;
            best.specificity = spec;
            best.precision = (tp + fp) > 0.0 ? tp / (tp + fp) : 0.0;
            best.f1 = (best.precision + sens) > 0.0
                          ? 2.0 * best.precision * sens / (best.precision + sens)
                          : 0.0;
        }
    }
    return best;
}

json MetricsReport::to_json() const {
    return json{{"auroc", auroc},
                {"aupr", aupr},
                {"f1", f1},
                {"sensitivity", sensitivity},
                {"specificity", specificity},
                {"youden_threshold", youden_threshold},
                {"split", split},
                {"regime", regime}};
}

MetricsReport MetricsReport::from_json(const json& j) {
    MetricsReport m;
    m.auroc = j.at("auroc");
    m.aupr = j.at("aupr");
    m.f1 = j.at("f1");
    m.sensitivity = j.at("sensitivity");
    m.specificity = j.at("specificity");
    m.youden_threshold = j.at("youden_threshold");
    m.split = j.value("split", "");
    m.regime = j.value("regime", "");
    return m;
}

MetricsReport compute_binary_metrics(const std::vector<double>& scores_pos,
                                     const std::vector<int>& labels_pos) {
    MetricsReport m;
    RocPr rp = roc_pr_areas(scores_pos, labels_pos);
    YoudenResult y = youden_confusion(scores_pos, labels_pos);
    m.auroc = rp.auroc;
    m.aupr = rp.aupr;
    m.f1 = y.f1;
    m.sensitivity = y.sensitivity;
    m.specificity = y.specificity;
    m.youden_threshold = y.threshold;
    return m;
}

json ModalityAudit::to_json() const {
    return json{{"modality", modality},
                {"n_synth", n_synth},
                {"n_real", n_real},
                {"svr", svr},
                {"rvr", rvr},
                {"svs", svs},
                {"wd_svr_rvr", wd_svr_rvr},
                {"wd_rvr_svs", wd_rvr_svs},
                {"ks_svr_rvr", {{"statistic", ks_svr_rvr.statistic}, {"p_value", ks_svr_rvr.p_value}}},
                {"ks_rvr_svs", {{"statistic", ks_rvr_svs.statistic}, {"p_value", ks_rvr_svs.p_value}}},
                {"max_svr", max_svr},
                {"memorized", memorized},
                {"svr_exceeds_rvr", svr_exceeds_rvr}};
}

ModalityAudit audit_modality(const std::string& modality,
                             const std::vector<std::vector<double>>& synthetic,
                             const std::vector<std::vector<double>>& real,
                             int workers) {
    ModalityAudit a;
    a.modality = modality;
    a.n_synth = static_cast<int>(synthetic.size());
    a.n_real = static_cast<int>(real.size());

    if (workers > 1 && synthetic.size() >= 8) {
        // The SvR pass dominates; split set A across threads. Each row is
        // independent, so the result is identical to the sequential pass.
        size_t chunks = std::min<size_t>(static_cast<size_t>(workers), synthetic.size());
        std::vector<std::vector<double>> parts(chunks);
        std::vector<std::thread> pool;
        size_t per = (synthetic.size() + chunks - 1) / chunks;
        for (size_t c = 0; c < chunks; ++c) {
            pool.emplace_back([&, c]() {
                size_t lo = c * per, hi = std::min(synthetic.size(), lo + per);
                if (lo >= hi) return;
                std::vector<std::vector<double>> slice(synthetic.begin() + static_cast<long>(lo),
                                                       synthetic.begin() + static_cast<long>(hi));
                parts[c] = max_corr_distribution(slice, real, false);
            });
        }
        for (auto& t : pool) t.join();
        for (auto& p : parts) a.svr.insert(a.svr.end(), p.begin(), p.end());
    } else {
        a.svr = max_corr_distribution(synthetic, real, false);
    }
    a.rvr = max_corr_distribution(real, real, true);
    a.svs = max_corr_distribution(synthetic, synthetic, true);

    a.wd_svr_rvr = wasserstein_1d(a.svr, a.rvr);
    a.wd_rvr_svs = wasserstein_1d(a.rvr, a.svs);
    a.ks_svr_rvr = ks_two_sample(a.svr, a.rvr);
    a.ks_rvr_svs = ks_two_sample(a.rvr, a.svs);

    a.max_svr = *std::max_element(a.svr.begin(), a.svr.end());
    a.memorized = a.max_svr >= kMemorizationThreshold;
    double mean_svr = std::accumulate(a.svr.begin(), a.svr.end(), 0.0) / a.svr.size();
    double mean_rvr = std::accumulate(a.rvr.begin(), a.rvr.end(), 0.0) / a.rvr.size();
    a.svr_exceeds_rvr = mean_svr > mean_rvr;
    return a;
}

}  // namespace retsyn::evalkit

#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "retsyn/common.hpp"

namespace retsyn::evalkit {

// Pearson correlation of two equal-length vectors. Raises NumericalError on
// zero-variance input.
double pearsonr(const std::vector<double>& a, const std::vector<double>& b);

// For each element of set_a, the maximum correlation against set_b.
// exclude_self is the within-set mode: set_a and set_b are the same set and
// the matching index is skipped.
std::vector<double> max_corr_distribution(const std::vector<std::vector<double>>& set_a,
                                          const std::vector<std::vector<double>>& set_b,
                                          bool exclude_self);

// 1-D earth mover distance between empirical distributions.
double wasserstein_1d(const std::vector<double>& u, const std::vector<double>& v);

struct KsResult {
    double statistic = 0.0;
    double p_value = 1.0;
};
KsResult ks_two_sample(const std::vector<double>& u, const std::vector<double>& v);

// Survival function of the Kolmogorov distribution, Q(lambda).
double kolmogorov_q(double lambda);

struct RocPr {
    double auroc = 0.0;
    double aupr = 0.0;
};
// labels are 0/1; scores are "probability of class 1".
RocPr roc_pr_areas(const std::vector<double>& scores, const std::vector<int>& labels);

struct YoudenResult {
    double threshold = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    double f1 = 0.0;
    double youden_j = 0.0;
    double precision = 0.0;
};
// Maximizes sensitivity + specificity - 1 over cut points between sorted
// unique scores (rule: predict positive when score > threshold). Ties on J
// resolve to the smallest threshold.
YoudenResult youden_confusion(const std::vector<double>& scores, const std::vector<int>& labels);

struct MetricsReport {
    double auroc = 0.0, aupr = 0.0, f1 = 0.0;
    double sensitivity = 0.0, specificity = 0.0;
    double youden_threshold = 0.0;
    std::string split;
    std::string regime;
    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
};

// Full binary suite; scores oriented as probability of the positive class.
MetricsReport compute_binary_metrics(const std::vector<double>& scores_pos,
                                     const std::vector<int>& labels_pos);

// Memorization / diversity audit for one modality. svr: each synthetic
// image's max correlation to the real set; rvr / svs: within-set versions.
struct ModalityAudit {
    std::string modality;
    std::vector<double> svr, rvr, svs;
    double wd_svr_rvr = 0.0, wd_rvr_svs = 0.0;
    KsResult ks_svr_rvr, ks_rvr_svs;
    int n_synth = 0, n_real = 0;
    double max_svr = -1.0;
    bool memorized = false;        // any SvR >= memorization threshold
    bool svr_exceeds_rvr = false;  // mean(SvR) > mean(RvR)
    nlohmann::json to_json() const;
};

constexpr double kMemorizationThreshold = 0.999;

ModalityAudit audit_modality(const std::string& modality,
                             const std::vector<std::vector<double>>& synthetic,
                             const std::vector<std::vector<double>>& real,
                             int workers = 1);

}  // namespace retsyn::evalkit

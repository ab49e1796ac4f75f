#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "retsyn/dataman.hpp"
#include "retsyn/nn/backbones.hpp"

namespace retsyn::modfilter {

// Gorodkin multiclass MCC from a confusion matrix (rows = truth, columns =
// prediction). Defined as 0 when a denominator term vanishes.
double mcc_multiclass(const std::vector<std::vector<double>>& confusion);

struct FilterTrainConfig {
    nn::BackboneConfig backbone;  // num_outputs is overwritten with the class count
    int epochs = 100;
    double lr = 1e-5;
    double weight_decay = 0.1;
    int batch_size = 16;
    uint64_t seed = 0;
    std::string init_checkpoint;  // optional pretrained start; random init otherwise
};

struct PerClassPrf {
    std::string modality;
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    int support = 0;
};

struct FilterReport {
    std::vector<PerClassPrf> val_prf, test_prf;
    double mcc_val = 0.0, mcc_test = 0.0;
    std::vector<std::vector<double>> confusion_val, confusion_test;
    nlohmann::json to_json() const;
};

// In-memory training set: images grouped with modality-index labels.
struct ModalityDataset {
    std::vector<Image> images;
    std::vector<int> modality_idx;
    std::vector<std::string> classes;  // index -> modality tag
};

struct FilterModel {
    std::vector<std::string> classes;
    std::unique_ptr<nn::Backbone> net;
    int side = 0;

    // Per-class probabilities [N, K].
    Tensor predict_probs(const std::vector<Image>& images);
    // Pooled feature embedding [N, D] (the FiLM conditioning vector).
    Tensor embed(const std::vector<Image>& images);
    int class_index(const std::string& modality) const;
};

struct TrainedFilter {
    FilterModel model;
    FilterReport report;
};

TrainedFilter train_filter(const ModalityDataset& train, const ModalityDataset& val,
                           const ModalityDataset& test, const FilterTrainConfig& cfg);

// ---------------------------------------------------------------------------
// Gate

struct GateConfig {
    // Missing entry (FAF by default) means correct-modality-only gating.
    std::map<std::string, double> thresholds = {
        {"OCTA-SMAC", 0.90}, {"OCT-BONH", 0.99}, {"OCT-BMAC", 0.96}};
    int budget_per_class = 1000;
};

struct FilterDecision {
    std::string image_id;
    std::string generation_modality;
    std::string predicted_modality;
    double confidence_predicted = 0.0;
    double threshold_used = 0.0;  // 0 when the modality carries no threshold
    bool accepted = false;
    std::string reason;  // pass | wrong_modality | low_confidence | budget
};

struct GateItem {
    std::string id;
    std::string modality;        // generation modality
    dataman::Label label = dataman::Label::UNKNOWN;
    const Image* image = nullptr;
};

struct GateResult {
    std::vector<FilterDecision> decisions;
    std::vector<size_t> accepted;  // indices into the input stream
};

// Sequential fold over the stream: accept while the (modality, class) budget
// lasts; every decision is logged. Inference batches internally.
GateResult gate_synthetic(const std::vector<GateItem>& stream, FilterModel& model,
                          const GateConfig& gate);

void save_rejection_log(const std::string& path, const std::vector<FilterDecision>& decisions);

}  // namespace retsyn::modfilter

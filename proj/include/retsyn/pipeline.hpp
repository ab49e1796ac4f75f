#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "retsyn/classify.hpp"
#include "retsyn/dataman.hpp"
#include "retsyn/diffusion.hpp"
#include "retsyn/modfilter.hpp"
#include "retsyn/phantom.hpp"

namespace retsyn::pipeline {

struct DiffusionStageConfig {
    int timesteps = 1000;
    double beta_start = 0.0015;
    double beta_end = 0.0195;
    int image_side = 0;  // 0 -> preprocess side
    std::vector<int> channels = {64, 128, 128};
    int res_blocks = 2;
    int attn_head_channels = 32;
    int epochs = 30;
    int batch_size = 8;
    double lr = 1e-3;
    int sample_per_class = 1300;  // raw draws offered to the gate
    double snr_threshold = 1e-3;  // required signal-to-noise at the last step
};

struct FilterStageConfig {
    std::string backbone = "effnet_b0";
    std::vector<int> compact_widths = {16, 32, 64, 128};
    int epochs = 100;
    double lr = 1e-5;
    double weight_decay = 0.1;
    int batch_size = 16;
    std::string init_checkpoint;  // optional pretrained weights
};

struct ClassifierStageConfig {
    std::string backbone = "effnet_b0";
    std::vector<int> compact_widths = {16, 32, 64, 128};
    int epochs = 200;
    int patience = 20;
    double lr = 1e-3;
    int lr_step = 50;
    double lr_gamma = 0.5;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    int batch_size = 16;
    bool augment = true;
    bool film = false;  // modality-aware variant (excluded from acceptance)
};

struct FusionStageConfig {
    std::vector<int> hidden = {16, 8};
    int epochs = 200;
    double lr = 1e-2;
    int batch_size = 16;
};

struct SplitStageConfig {
    double test_frac = 0.2;
    double val_frac = 0.2;
    double tolerance = 0.05;
};

struct DatasetConfig {
    std::string source = "phantom";  // "phantom" | "manifest"
    phantom::PhantomConfig phantom;
    std::string manifest_path;
    std::string metadata_path;
};

struct AuditStageConfig {
    int sample_size = 200;
};

struct ExperimentConfig {
    uint64_t seed = 1234;
    std::string out_dir = "runs/exp";
    int workers = 1;
    DatasetConfig dataset;
    SplitStageConfig split;
    dataman::PreprocessConfig preprocess;
    dataman::AugmentConfig augment;
    DiffusionStageConfig diffusion;
    modfilter::GateConfig gate;
    FilterStageConfig filter;
    ClassifierStageConfig classifier;
    FusionStageConfig fusion;
    AuditStageConfig audit;

    // runtime-only knobs (not part of the hash)
    bool allow_config_mismatch = false;

    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::string& path);  // applies env overrides
    std::string config_hash() const;
    int diffusion_side() const { return diffusion.image_side > 0 ? diffusion.image_side : preprocess.side; }
    std::filesystem::path out() const { return out_dir; }
};

// Stage entry points. Each writes a stage manifest under <out>/stages/ and
// refuses to run when upstream stages are missing or were produced under a
// different configuration.
void stage_prepare(const ExperimentConfig& cfg);
void stage_train_ddpm(const ExperimentConfig& cfg);
void stage_sample(const ExperimentConfig& cfg);
void stage_train_filter(const ExperimentConfig& cfg);
void stage_gate(const ExperimentConfig& cfg);
void stage_audit(const ExperimentConfig& cfg);
void stage_train_unimodal(const ExperimentConfig& cfg, classify::TrainRegime regime);
void stage_train_multimodal(const ExperimentConfig& cfg, bool use_metadata,
                            const std::string& source_regime);
void stage_evaluate(const ExperimentConfig& cfg);
void stage_explain(const ExperimentConfig& cfg);
void stage_report(const ExperimentConfig& cfg);

// Loads the manifest produced by `prepare` (records, metadata, splits).
dataman::DatasetManifest load_run_manifest(const ExperimentConfig& cfg);

// Preprocessed images for one modality and split. Synthetic pool loads from
// the gated accepted manifest.
classify::LabeledImages load_split_images(const ExperimentConfig& cfg,
                                          const dataman::DatasetManifest& m,
                                          const std::string& modality, dataman::Split split);
classify::LabeledImages load_gated_synth(const ExperimentConfig& cfg, const std::string& modality);

}  // namespace retsyn::pipeline

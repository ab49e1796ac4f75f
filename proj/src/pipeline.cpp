#include "retsyn/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>

#include "retsyn/evalkit.hpp"
#include "retsyn/explain.hpp"
#include "retsyn/imageio.hpp"
#include "retsyn/nn/checkpoint.hpp"
#include "retsyn/plotting.hpp"

namespace retsyn::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using classify::TrainRegime;
using dataman::Label;
using dataman::Provenance;
using dataman::Split;

// ---------------------------------------------------------------------------
// Config serialization

namespace {

json phantom_to_json(const phantom::PhantomConfig& p) {
    return json{{"side", p.side},
                {"modalities", p.modalities},
                {"class_signal_strength", p.class_signal_strength},
                {"n_families", p.n_families},
                {"eyes_per_family", p.eyes_per_family},
                {"pos_fraction", p.pos_fraction},
                {"seed", p.seed},
                {"metadata_age_shift", p.metadata_age_shift}};
}

phantom::PhantomConfig phantom_from_json(const json& j) {
    phantom::PhantomConfig p;
    p.side = j.value("side", p.side);
    p.modalities = j.value("modalities", p.modalities);
    p.class_signal_strength = j.value("class_signal_strength", p.class_signal_strength);
    p.n_families = j.value("n_families", p.n_families);
    p.eyes_per_family = j.value("eyes_per_family", p.eyes_per_family);
    p.pos_fraction = j.value("pos_fraction", p.pos_fraction);
    p.seed = j.value("seed", p.seed);
    p.metadata_age_shift = j.value("metadata_age_shift", p.metadata_age_shift);
    return p;
}

}  // namespace

json ExperimentConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    j["workers"] = workers;
    j["dataset"] = {{"source", dataset.source},
                    {"phantom", phantom_to_json(dataset.phantom)},
                    {"manifest_path", dataset.manifest_path},
                    {"metadata_path", dataset.metadata_path}};
    j["split"] = {{"test_frac", split.test_frac},
                  {"val_frac", split.val_frac},
                  {"tolerance", split.tolerance}};
    j["preprocess"] = {{"side", preprocess.side},
                       {"bscan_row_threshold", preprocess.bscan_row_threshold},
                       {"fundus_threshold", preprocess.fundus_threshold},
                       {"fundus_zoom", preprocess.fundus_zoom}};
    j["augment"] = {{"rotate_deg", augment.rotate_deg},   {"shear_deg", augment.shear_deg},
                    {"brightness", augment.brightness},   {"contrast", augment.contrast},
                    {"zoom", augment.zoom},               {"translate_frac", augment.translate_frac}};
    j["diffusion"] = {{"timesteps", diffusion.timesteps},
                      {"beta_start", diffusion.beta_start},
                      {"beta_end", diffusion.beta_end},
                      {"image_side", diffusion.image_side},
                      {"channels", diffusion.channels},
                      {"res_blocks", diffusion.res_blocks},
                      {"attn_head_channels", diffusion.attn_head_channels},
                      {"epochs", diffusion.epochs},
                      {"batch_size", diffusion.batch_size},
                      {"lr", diffusion.lr},
                      {"sample_per_class", diffusion.sample_per_class},
                      {"snr_threshold", diffusion.snr_threshold}};
    j["gate"] = {{"thresholds", gate.thresholds}, {"budget_per_class", gate.budget_per_class}};
    j["filter"] = {{"backbone", filter.backbone},
                   {"compact_widths", filter.compact_widths},
                   {"epochs", filter.epochs},
                   {"lr", filter.lr},
                   {"weight_decay", filter.weight_decay},
                   {"batch_size", filter.batch_size},
                   {"init_checkpoint", filter.init_checkpoint}};
    j["classifier"] = {{"backbone", classifier.backbone},
                       {"compact_widths", classifier.compact_widths},
                       {"epochs", classifier.epochs},
                       {"patience", classifier.patience},
                       {"lr", classifier.lr},
                       {"lr_step", classifier.lr_step},
                       {"lr_gamma", classifier.lr_gamma},
                       {"focal_gamma", classifier.focal_gamma},
                       {"focal_alpha", classifier.focal_alpha},
                       {"batch_size", classifier.batch_size},
                       {"augment", classifier.augment},
                       {"film", classifier.film}};
    j["fusion"] = {{"hidden", fusion.hidden},
                   {"epochs", fusion.epochs},
                   {"lr", fusion.lr},
                   {"batch_size", fusion.batch_size}};
    j["audit"] = {{"sample_size", audit.sample_size}};
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.workers = j.value("workers", c.workers);
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        c.dataset.source = d.value("source", c.dataset.source);
        if (d.contains("phantom")) c.dataset.phantom = phantom_from_json(d.at("phantom"));
        c.dataset.manifest_path = d.value("manifest_path", c.dataset.manifest_path);
        c.dataset.metadata_path = d.value("metadata_path", c.dataset.metadata_path);
    }
    if (j.contains("split")) {
        const auto& s = j.at("split");
        c.split.test_frac = s.value("test_frac", c.split.test_frac);
        c.split.val_frac = s.value("val_frac", c.split.val_frac);
        c.split.tolerance = s.value("tolerance", c.split.tolerance);
    }
    if (j.contains("preprocess")) {
        const auto& p = j.at("preprocess");
        c.preprocess.side = p.value("side", c.preprocess.side);
        c.preprocess.bscan_row_threshold =
            p.value("bscan_row_threshold", c.preprocess.bscan_row_threshold);
        c.preprocess.fundus_threshold = p.value("fundus_threshold", c.preprocess.fundus_threshold);
        c.preprocess.fundus_zoom = p.value("fundus_zoom", c.preprocess.fundus_zoom);
    }
    if (j.contains("augment")) {
        const auto& a = j.at("augment");
        c.augment.rotate_deg = a.value("rotate_deg", c.augment.rotate_deg);
        c.augment.shear_deg = a.value("shear_deg", c.augment.shear_deg);
        c.augment.brightness = a.value("brightness", c.augment.brightness);
        c.augment.contrast = a.value("contrast", c.augment.contrast);
        c.augment.zoom = a.value("zoom", c.augment.zoom);
        c.augment.translate_frac = a.value("translate_frac", c.augment.translate_frac);
    }
    if (j.contains("diffusion")) {
        const auto& d = j.at("diffusion");
        c.diffusion.timesteps = d.value("timesteps", c.diffusion.timesteps);
        c.diffusion.beta_start = d.value("beta_start", c.diffusion.beta_start);
        c.diffusion.beta_end = d.value("beta_end", c.diffusion.beta_end);
        c.diffusion.image_side = d.value("image_side", c.diffusion.image_side);
        c.diffusion.channels = d.value("channels", c.diffusion.channels);
        c.diffusion.res_blocks = d.value("res_blocks", c.diffusion.res_blocks);
        c.diffusion.attn_head_channels =
            d.value("attn_head_channels", c.diffusion.attn_head_channels);
        c.diffusion.epochs = d.value("epochs", c.diffusion.epochs);
        c.diffusion.batch_size = d.value("batch_size", c.diffusion.batch_size);
        c.diffusion.lr = d.value("lr", c.diffusion.lr);
        c.diffusion.sample_per_class = d.value("sample_per_class", c.diffusion.sample_per_class);
        c.diffusion.snr_threshold = d.value("snr_threshold", c.diffusion.snr_threshold);
    }
    if (j.contains("gate")) {
        const auto& g = j.at("gate");
        if (g.contains("thresholds"))
            c.gate.thresholds = g.at("thresholds").get<std::map<std::string, double>>();
        c.gate.budget_per_class = g.value("budget_per_class", c.gate.budget_per_class);
    }
    if (j.contains("filter")) {
        const auto& f = j.at("filter");
        c.filter.backbone = f.value("backbone", c.filter.backbone);
        c.filter.compact_widths = f.value("compact_widths", c.filter.compact_widths);
        c.filter.epochs = f.value("epochs", c.filter.epochs);
        c.filter.lr = f.value("lr", c.filter.lr);
        c.filter.weight_decay = f.value("weight_decay", c.filter.weight_decay);
        c.filter.batch_size = f.value("batch_size", c.filter.batch_size);
        c.filter.init_checkpoint = f.value("init_checkpoint", c.filter.init_checkpoint);
    }
    if (j.contains("classifier")) {
        const auto& k = j.at("classifier");
        c.classifier.backbone = k.value("backbone", c.classifier.backbone);
        c.classifier.compact_widths = k.value("compact_widths", c.classifier.compact_widths);
        c.classifier.epochs = k.value("epochs", c.classifier.epochs);
        c.classifier.patience = k.value("patience", c.classifier.patience);
        c.classifier.lr = k.value("lr", c.classifier.lr);
        c.classifier.lr_step = k.value("lr_step", c.classifier.lr_step);
        c.classifier.lr_gamma = k.value("lr_gamma", c.classifier.lr_gamma);
        c.classifier.focal_gamma = k.value("focal_gamma", c.classifier.focal_gamma);
        c.classifier.focal_alpha = k.value("focal_alpha", c.classifier.focal_alpha);
        c.classifier.batch_size = k.value("batch_size", c.classifier.batch_size);
        c.classifier.augment = k.value("augment", c.classifier.augment);
        c.classifier.film = k.value("film", c.classifier.film);
    }
    if (j.contains("fusion")) {
        const auto& f = j.at("fusion");
        c.fusion.hidden = f.value("hidden", c.fusion.hidden);
        c.fusion.epochs = f.value("epochs", c.fusion.epochs);
        c.fusion.lr = f.value("lr", c.fusion.lr);
        c.fusion.batch_size = f.value("batch_size", c.fusion.batch_size);
    }
    if (j.contains("audit")) c.audit.sample_size = j.at("audit").value("sample_size", c.audit.sample_size);
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config: " + path);
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    ExperimentConfig c = from_json(j);
    if (const char* env = std::getenv("RETSYN_OUT_DIR")) c.out_dir = env;
    if (const char* env = std::getenv("RETSYN_WORKERS")) c.workers = std::max(1, std::atoi(env));
    return c;
}

std::string ExperimentConfig::config_hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a(to_json().dump())));
    return buf;
}

// ---------------------------------------------------------------------------
// Stage bookkeeping

namespace {

fs::path stage_file(const ExperimentConfig& cfg, const std::string& stage) {
    return cfg.out() / "stages" / (stage + ".json");
}

void write_stage(const ExperimentConfig& cfg, const std::string& stage,
                 const std::vector<std::string>& produced) {
    fs::create_directories(cfg.out() / "stages");
    json j = {{"stage", stage}, {"config_hash", cfg.config_hash()}, {"produced", produced}};
    std::ofstream f(stage_file(cfg, stage));
    f << j.dump(2) << '\n';
}

void require_stage(const ExperimentConfig& cfg, const std::string& stage) {
    fs::path p = stage_file(cfg, stage);
    if (!fs::exists(p))
        throw MissingArtifactError("missing upstream stage '" + stage + "'; run `retsyn " + stage +
                                   "` first");
    std::ifstream f(p);
    json j;
    f >> j;
    if (j.value("config_hash", "") != cfg.config_hash() && !cfg.allow_config_mismatch)
        throw ConfigError("stage '" + stage +
                          "' was produced under a different config; re-run it or pass "
                          "--allow-config-mismatch");
}

uint64_t stage_seed(const ExperimentConfig& cfg, const std::string& tag) {
    return fnv1a(tag, cfg.seed ^ 0x517cc1b727220a95ull);
}

std::vector<std::string> run_modalities(const dataman::DatasetManifest& m) {
    std::set<std::string> present;
    for (const auto& r : m.records)
        if (r.provenance == Provenance::REAL) present.insert(r.modality);
    std::vector<std::string> out;
    for (const auto& mod : dataman::pipeline_modalities())
        if (present.count(mod)) out.push_back(mod);
    return out;
}

nn::BackboneConfig classifier_backbone(const ExperimentConfig& cfg) {
    nn::BackboneConfig b;
    b.kind = cfg.classifier.backbone;
    b.in_channels = 3;
    b.num_outputs = 1;
    b.compact_widths = cfg.classifier.compact_widths;
    return b;
}

json backbone_to_json(const nn::BackboneConfig& b) {
    return json{{"kind", b.kind},
                {"in_channels", b.in_channels},
                {"num_outputs", b.num_outputs},
                {"compact_widths", b.compact_widths},
                {"film", b.film},
                {"film_emb_dim", b.film_emb_dim}};
}

nn::BackboneConfig backbone_from_json(const json& j) {
    nn::BackboneConfig b;
    b.kind = j.at("kind");
    b.in_channels = j.at("in_channels");
    b.num_outputs = j.at("num_outputs");
    b.compact_widths = j.at("compact_widths").get<std::vector<int>>();
    b.film = j.value("film", false);
    b.film_emb_dim = j.value("film_emb_dim", 0);
    return b;
}

Image load_preprocessed(const ExperimentConfig& cfg, const dataman::ImageRecord& r) {
    Image raw = read_png_gray(r.path);
    return dataman::preprocess(raw, r.modality, cfg.preprocess);
}

std::unique_ptr<nn::Backbone> load_classifier_ckpt(const std::string& path, json* header_out) {
    json h = nn::read_checkpoint_header(path);
    auto net = nn::make_backbone(backbone_from_json(h.at("backbone")), 0);
    auto params = net->params();
    nn::load_checkpoint(path, params);
    if (header_out) *header_out = h;
    return net;
}

std::string classifier_ckpt_path(const ExperimentConfig& cfg, const std::string& modality,
                                 const std::string& regime) {
    return (cfg.out() / "classifiers" / (modality + "_" + regime + ".ckpt")).string();
}

void write_json(const fs::path& p, const json& j) {
    fs::create_directories(p.parent_path());
    std::ofstream f(p);
    f << j.dump(2) << '\n';
}

json read_json(const fs::path& p) {
    std::ifstream f(p);
    if (!f) throw MissingArtifactError("missing file: " + p.string());
    json j;
    f >> j;
    return j;
}

}  // namespace

dataman::DatasetManifest load_run_manifest(const ExperimentConfig& cfg) {
    dataman::DatasetManifest m;
    m.records = dataman::load_manifest((cfg.out() / "manifest.tsv").string());
    if (fs::exists(cfg.out() / "metadata.tsv"))
        m.metadata = dataman::load_metadata((cfg.out() / "metadata.tsv").string());
    m.splits = dataman::load_splits((cfg.out() / "splits.tsv").string());
    return m;
}

classify::LabeledImages load_split_images(const ExperimentConfig& cfg,
                                          const dataman::DatasetManifest& m,
                                          const std::string& modality, Split split) {
    classify::LabeledImages out;
    for (const auto& r : m.records) {
        if (r.provenance != Provenance::REAL || r.modality != modality) continue;
        if (r.label == Label::UNKNOWN) continue;
        if (m.splits.of(r.family_id) != split) continue;
        out.images.push_back(load_preprocessed(cfg, r));
        out.y_pos.push_back(r.label == Label::POS ? 1 : 0);
        out.eye_ids.push_back(r.eye_id);
    }
    return out;
}

classify::LabeledImages load_gated_synth(const ExperimentConfig& cfg, const std::string& modality) {
    classify::LabeledImages out;
    auto records = dataman::load_manifest((cfg.out() / "gate" / "accepted_manifest.tsv").string());
    for (const auto& r : records) {
        if (r.modality != modality) continue;
        out.images.push_back(load_preprocessed(cfg, r));
        out.y_pos.push_back(r.label == Label::POS ? 1 : 0);
        out.eye_ids.push_back(r.eye_id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// prepare

void stage_prepare(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.out());
    write_json(cfg.out() / "config.json", cfg.to_json());

    dataman::DatasetManifest m;
    if (cfg.dataset.source == "phantom") {
        phantom::PhantomConfig pc = cfg.dataset.phantom;
        pc.side = std::max(pc.side, 32);
        pc.seed = stage_seed(cfg, "phantom");
        m = phantom::generate_phantoms(pc, cfg.out().string());
    } else if (cfg.dataset.source == "manifest") {
        m.records = dataman::load_manifest(cfg.dataset.manifest_path);
        if (!cfg.dataset.metadata_path.empty())
            m.metadata = dataman::load_metadata(cfg.dataset.metadata_path);
    } else {
        throw ConfigError("unknown dataset source: " + cfg.dataset.source);
    }

    dataman::validate_manifest(m, /*for_classification=*/true, /*check_files=*/true);
    m.splits = dataman::make_splits(m, cfg.split.test_frac, cfg.split.val_frac,
                                    stage_seed(cfg, "splits"), cfg.split.tolerance);

    dataman::save_manifest((cfg.out() / "manifest.tsv").string(), m.records);
    dataman::save_metadata((cfg.out() / "metadata.tsv").string(), m.metadata);
    dataman::save_splits((cfg.out() / "splits.tsv").string(), m.splits);

    json summary = {{"records", m.records.size()},
                    {"eyes", {{"train", m.splits.eyes[0]}, {"val", m.splits.eyes[1]}, {"test", m.splits.eyes[2]}}},
                    {"pos_frac",
                     {{"train", m.splits.pos_frac[0]},
                      {"val", m.splits.pos_frac[1]},
                      {"test", m.splits.pos_frac[2]}}}};
    write_json(cfg.out() / "prepare_summary.json", summary);
    write_stage(cfg, "prepare",
                {"manifest.tsv", "metadata.tsv", "splits.tsv", "prepare_summary.json"});
}

// ---------------------------------------------------------------------------
// train-ddpm

namespace {

diffusion::DdpmDataset ddpm_dataset(const ExperimentConfig& cfg, const dataman::DatasetManifest& m,
                                    const std::string& modality) {
    // Generative models train on the development split (train + val).
    std::vector<const dataman::ImageRecord*> recs;
    for (const auto& r : m.records) {
        if (r.provenance != Provenance::REAL || r.modality != modality) continue;
        if (r.label == Label::UNKNOWN) continue;
        if (m.splits.of(r.family_id) == Split::TEST) continue;
        recs.push_back(&r);
    }
    if (recs.empty()) raise("train-ddpm: no development images for modality " + modality);
    int side = cfg.diffusion_side();
    diffusion::DdpmDataset ds;
    ds.images = Tensor({static_cast<int>(recs.size()), 1, side, side});
    for (size_t i = 0; i < recs.size(); ++i) {
        Image img = load_preprocessed(cfg, *recs[i]);
        img = dataman::resize_bilinear(img, side, side);
        std::copy(img.pix.begin(), img.pix.end(),
                  ds.images.ptr() + i * static_cast<size_t>(side) * side);
        ds.labels.push_back(recs[i]->label == Label::POS ? 1 : 0);
    }
    return ds;
}

nn::UNetConfig unet_config(const ExperimentConfig& cfg) {
    nn::UNetConfig u;
    u.in_channels = 1;
    u.channels = cfg.diffusion.channels;
    u.res_blocks = cfg.diffusion.res_blocks;
    u.attn_head_channels = cfg.diffusion.attn_head_channels;
    u.num_classes = 2;
    return u;
}

void check_schedule_snr(const diffusion::DiffusionSchedule& s, double threshold) {
    double ab = s.alpha_bar.back();
    double snr = ab / (1.0 - ab);
    if (snr > threshold)
        throw ConfigError("diffusion schedule leaves too much signal at the final step (snr " +
                          std::to_string(snr) + " > " + std::to_string(threshold) +
                          "); raise timesteps or beta_end");
}

}  // namespace

void stage_train_ddpm(const ExperimentConfig& cfg) {
    require_stage(cfg, "prepare");
    auto m = load_run_manifest(cfg);
    auto sched = diffusion::build_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_start,
                                           cfg.diffusion.beta_end);
    check_schedule_snr(sched, cfg.diffusion.snr_threshold);

    fs::create_directories(cfg.out() / "ddpm");
    std::vector<std::string> produced;
    for (const auto& modality : run_modalities(m)) {
        auto ds = ddpm_dataset(cfg, m, modality);
        nn::CondUNet model(unet_config(cfg), stage_seed(cfg, "ddpm.init." + modality));
        diffusion::DdpmTrainConfig tc;
        tc.epochs = cfg.diffusion.epochs;
        tc.batch_size = cfg.diffusion.batch_size;
        tc.lr = cfg.diffusion.lr;
        tc.seed = stage_seed(cfg, "ddpm.train." + modality);
        auto curve = diffusion::train_ddpm(model, ds, sched, tc);

        json header = {{"model", "cond_unet"},
                       {"modality", modality},
                       {"image_side", cfg.diffusion_side()},
                       {"classes", {"NEG", "POS"}},
                       {"unet",
                        {{"in_channels", 1},
                         {"channels", cfg.diffusion.channels},
                         {"res_blocks", cfg.diffusion.res_blocks},
                         {"attn_head_channels", cfg.diffusion.attn_head_channels},
                         {"num_classes", 2}}},
                       {"schedule",
                        {{"timesteps", cfg.diffusion.timesteps},
                         {"beta_start", cfg.diffusion.beta_start},
                         {"beta_end", cfg.diffusion.beta_end}}}};
        std::string ckpt = (cfg.out() / "ddpm" / (modality + ".ckpt")).string();
        auto params = model.params();
        nn::save_checkpoint(ckpt, header, params);
        produced.push_back(ckpt);

        std::ofstream lf(cfg.out() / "ddpm" / (modality + "_loss.tsv"));
        for (size_t i = 0; i < curve.step_losses.size(); ++i)
            lf << i << '\t' << curve.step_losses[i] << '\n';
    }
    write_stage(cfg, "train-ddpm", produced);
}

// ---------------------------------------------------------------------------
// sample

void stage_sample(const ExperimentConfig& cfg) {
    require_stage(cfg, "train-ddpm");
    auto m = load_run_manifest(cfg);
    fs::create_directories(cfg.out() / "synth" / "images");

    std::vector<dataman::ImageRecord> synth_records;
    int counter = 0;
    for (const auto& modality : run_modalities(m)) {
        std::string ckpt = (cfg.out() / "ddpm" / (modality + ".ckpt")).string();
        json h = nn::read_checkpoint_header(ckpt);
        nn::UNetConfig u;
        u.in_channels = h.at("unet").at("in_channels");
        u.channels = h.at("unet").at("channels").get<std::vector<int>>();
        u.res_blocks = h.at("unet").at("res_blocks");
        u.attn_head_channels = h.at("unet").at("attn_head_channels");
        u.num_classes = h.at("unet").at("num_classes");
        nn::CondUNet model(u, 0);
        auto params = model.params();
        nn::load_checkpoint(ckpt, params);
        auto sched = diffusion::build_schedule(h.at("schedule").at("timesteps"),
                                               h.at("schedule").at("beta_start"),
                                               h.at("schedule").at("beta_end"));
        int side = h.at("image_side");

        for (int cls = 0; cls < 2; ++cls) {
            Rng rng = Rng::seeded(stage_seed(cfg, "sample." + modality + "." + std::to_string(cls)));
            auto images = diffusion::sample(diffusion::predictor_for(model), sched, cls,
                                            cfg.diffusion.sample_per_class, side, rng);
            std::string cls_name = cls == 1 ? "POS" : "NEG";
            for (size_t i = 0; i < images.size(); ++i) {
                char name[160];
                std::snprintf(name, sizeof name, "synth_%s_%s_%04zu_raw.png", modality.c_str(),
                              cls_name.c_str(), i);
                std::string path = (cfg.out() / "synth" / "images" / name).string();
                write_png_gray(path, images[i]);
                dataman::ImageRecord r;
                r.path = path;
                r.family_id = dataman::kSyntheticFamily;
                r.patient_id = dataman::kSyntheticFamily;
                r.eye_id = "S" + std::to_string(counter++);
                r.modality = modality;
                r.label = cls == 1 ? Label::POS : Label::NEG;
                r.provenance = Provenance::SYNTHETIC;
                synth_records.push_back(std::move(r));
            }
        }
    }
    dataman::save_manifest((cfg.out() / "synth" / "manifest.tsv").string(), synth_records);
    // sampling manifest appended to the dataset manifest
    std::vector<dataman::ImageRecord> full = m.records;
    full.insert(full.end(), synth_records.begin(), synth_records.end());
    dataman::save_manifest((cfg.out() / "manifest_full.tsv").string(), full);
    write_stage(cfg, "sample", {"synth/manifest.tsv", "manifest_full.tsv"});
}

// ---------------------------------------------------------------------------
// train-filter

namespace {

modfilter::ModalityDataset filter_split(const ExperimentConfig& cfg,
                                        const dataman::DatasetManifest& m, Split split,
                                        const std::vector<std::string>& classes) {
    modfilter::ModalityDataset ds;
    ds.classes = classes;
    for (const auto& r : m.records) {
        if (r.provenance != Provenance::REAL) continue;
        if (m.splits.of(r.family_id) != split) continue;
        auto it = std::find(classes.begin(), classes.end(), r.modality);
        if (it == classes.end()) continue;
        ds.images.push_back(load_preprocessed(cfg, r));
        ds.modality_idx.push_back(static_cast<int>(it - classes.begin()));
    }
    return ds;
}

}  // namespace

void stage_train_filter(const ExperimentConfig& cfg) {
    require_stage(cfg, "prepare");
    auto m = load_run_manifest(cfg);

    std::set<std::string> tags;
    for (const auto& r : m.records)
        if (r.provenance == Provenance::REAL) tags.insert(r.modality);
    std::vector<std::string> classes(tags.begin(), tags.end());

    modfilter::FilterTrainConfig fc;
    fc.backbone.kind = cfg.filter.backbone;
    fc.backbone.in_channels = 3;
    fc.backbone.compact_widths = cfg.filter.compact_widths;
    fc.epochs = cfg.filter.epochs;
    fc.lr = cfg.filter.lr;
    fc.weight_decay = cfg.filter.weight_decay;
    fc.batch_size = cfg.filter.batch_size;
    fc.seed = stage_seed(cfg, "filter");
    fc.init_checkpoint = cfg.filter.init_checkpoint;

    auto train = filter_split(cfg, m, Split::TRAIN, classes);
    auto val = filter_split(cfg, m, Split::VAL, classes);
    auto test = filter_split(cfg, m, Split::TEST, classes);
    auto tf = modfilter::train_filter(train, val, test, fc);

    fs::create_directories(cfg.out() / "filter");
    json header = {{"model", "filter"},
                   {"classes", tf.model.classes},
                   {"side", tf.model.side},
                   {"backbone", backbone_to_json(tf.model.net->config())}};
    std::string ckpt = (cfg.out() / "filter" / "filter.ckpt").string();
    auto params = tf.model.net->params();
    nn::save_checkpoint(ckpt, header, params);
    write_json(cfg.out() / "filter" / "report.json", tf.report.to_json());
    write_stage(cfg, "train-filter", {"filter/filter.ckpt", "filter/report.json"});
}

namespace {

modfilter::FilterModel load_filter(const ExperimentConfig& cfg) {
    std::string path = (cfg.out() / "filter" / "filter.ckpt").string();
    json h = nn::read_checkpoint_header(path);
    modfilter::FilterModel fm;
    fm.classes = h.at("classes").get<std::vector<std::string>>();
    fm.side = h.at("side");
    fm.net = nn::make_backbone(backbone_from_json(h.at("backbone")), 0);
    auto params = fm.net->params();
    nn::load_checkpoint(path, params);
    return fm;
}

}  // namespace

// ---------------------------------------------------------------------------
// gate

void stage_gate(const ExperimentConfig& cfg) {
    require_stage(cfg, "sample");
    require_stage(cfg, "train-filter");
    auto fm = load_filter(cfg);
    auto synth = dataman::load_manifest((cfg.out() / "synth" / "manifest.tsv").string());

    std::vector<Image> images;
    images.reserve(synth.size());
    for (const auto& r : synth) images.push_back(load_preprocessed(cfg, r));
    std::vector<modfilter::GateItem> stream;
    for (size_t i = 0; i < synth.size(); ++i)
        stream.push_back({synth[i].eye_id, synth[i].modality, synth[i].label, &images[i]});

    auto result = modfilter::gate_synthetic(stream, fm, cfg.gate);

    fs::create_directories(cfg.out() / "gate" / "accepted");
    std::vector<dataman::ImageRecord> accepted;
    for (size_t idx : result.accepted) {
        const auto& r = synth[idx];
        fs::path src = r.path;
        std::string name = src.stem().string();
        // swap the trailing raw marker for the gate decision
        auto pos = name.rfind("_raw");
        if (pos != std::string::npos) name = name.substr(0, pos);
        fs::path dst = cfg.out() / "gate" / "accepted" / (name + "_pass.png");
        fs::copy_file(src, dst, fs::copy_options::overwrite_existing);
        dataman::ImageRecord copy = r;
        copy.path = dst.string();
        accepted.push_back(std::move(copy));
    }
    dataman::save_manifest((cfg.out() / "gate" / "accepted_manifest.tsv").string(), accepted);
    modfilter::save_rejection_log((cfg.out() / "gate" / "rejections.tsv").string(),
                                  result.decisions);

    std::map<std::string, int> counts;
    for (const auto& r : accepted) counts[r.modality + "/" + dataman::to_string(r.label)]++;
    json summary = {{"offered", synth.size()}, {"accepted", accepted.size()}, {"per_class", counts}};
    write_json(cfg.out() / "gate" / "summary.json", summary);
    write_stage(cfg, "gate",
                {"gate/accepted_manifest.tsv", "gate/rejections.tsv", "gate/summary.json"});
}

// ---------------------------------------------------------------------------
// audit

void stage_audit(const ExperimentConfig& cfg) {
    require_stage(cfg, "gate");
    auto m = load_run_manifest(cfg);
    auto accepted = dataman::load_manifest((cfg.out() / "gate" / "accepted_manifest.tsv").string());

    fs::create_directories(cfg.out() / "audit" / "plots");
    std::vector<std::string> produced;
    json all = json::array();
    for (const auto& modality : run_modalities(m)) {
        std::vector<std::vector<double>> synth_vecs, real_vecs;
        Rng rng = Rng::seeded(stage_seed(cfg, "audit." + modality));
        std::vector<const dataman::ImageRecord*> srecs;
        for (const auto& r : accepted)
            if (r.modality == modality) srecs.push_back(&r);
        rng.shuffle(srecs);
        if (static_cast<int>(srecs.size()) > cfg.audit.sample_size)
            srecs.resize(static_cast<size_t>(cfg.audit.sample_size));
        for (const auto* r : srecs) {
            Image img = load_preprocessed(cfg, *r);
            synth_vecs.emplace_back(img.pix.begin(), img.pix.end());
        }
        for (const auto& r : m.records) {
            if (r.provenance != Provenance::REAL || r.modality != modality) continue;
            Image img = load_preprocessed(cfg, r);
            real_vecs.emplace_back(img.pix.begin(), img.pix.end());
        }
        if (synth_vecs.size() < 2 || real_vecs.size() < 2)
            raise("audit: need at least 2 synthetic and 2 real images for " + modality);

        auto audit = evalkit::audit_modality(modality, synth_vecs, real_vecs, cfg.workers);
        all.push_back(audit.to_json());

        char buf[96];
        std::snprintf(buf, sizeof buf, "WD(SVR,RVR)=%.3f P=%.2e", audit.wd_svr_rvr,
                      audit.ks_svr_rvr.p_value);
        std::string a1 = buf;
        std::snprintf(buf, sizeof buf, "WD(RVR,SVS)=%.3f P=%.2e", audit.wd_rvr_svs,
                      audit.ks_rvr_svs.p_value);
        std::string a2 = buf;
        std::string plot = (cfg.out() / "audit" / "plots" / (modality + ".png")).string();
        plotting::plot_distributions(
            plot, modality + " MAX PEARSONR",
            {{"SVR", {0.25f, 0.45f, 0.85f}, audit.svr},
             {"RVR", {0.95f, 0.60f, 0.15f}, audit.rvr},
             {"SVS", {0.25f, 0.70f, 0.30f}, audit.svs}},
            {a1, a2});
        produced.push_back(plot);
    }
    write_json(cfg.out() / "audit" / "audit.json", all);
    produced.push_back("audit/audit.json");
    write_stage(cfg, "audit", produced);
}

// ---------------------------------------------------------------------------
// train-unimodal

void stage_train_unimodal(const ExperimentConfig& cfg, TrainRegime regime) {
    require_stage(cfg, "prepare");
    if (regime != TrainRegime::REAL_ONLY) require_stage(cfg, "gate");
    auto m = load_run_manifest(cfg);

    fs::create_directories(cfg.out() / "classifiers");
    std::vector<std::string> produced;
    for (const auto& modality : run_modalities(m)) {
        classify::ClassifierTrainConfig tc;
        tc.backbone = classifier_backbone(cfg);
        tc.epochs = cfg.classifier.epochs;
        tc.patience = cfg.classifier.patience;
        tc.lr = cfg.classifier.lr;
        tc.lr_step = cfg.classifier.lr_step;
        tc.lr_gamma = cfg.classifier.lr_gamma;
        tc.focal_gamma = cfg.classifier.focal_gamma;
        tc.focal_alpha = cfg.classifier.focal_alpha;
        tc.batch_size = cfg.classifier.batch_size;
        tc.seed = stage_seed(cfg, "unimodal." + modality + "." + classify::to_string(regime));
        tc.augment_enabled = cfg.classifier.augment;
        tc.augment = cfg.augment;
        tc.modality = modality;

        auto train = load_split_images(cfg, m, modality, Split::TRAIN);
        auto val = load_split_images(cfg, m, modality, Split::VAL);
        classify::LabeledImages synth;
        if (regime != TrainRegime::REAL_ONLY) synth = load_gated_synth(cfg, modality);

        auto res = classify::train_unimodal(train, val, regime,
                                            regime == TrainRegime::REAL_ONLY ? nullptr : &synth, tc);

        std::string regime_name = classify::to_string(regime);
        json header = {{"model", "unimodal"},
                       {"modality", modality},
                       {"regime", regime_name},
                       {"side", cfg.preprocess.side},
                       {"gradcam_hook", res.net->hook_name()},
                       {"backbone", backbone_to_json(res.net->config())},
                       {"best_epoch", res.best_epoch},
                       {"epochs_ran", res.epochs_ran}};
        std::string ckpt = classifier_ckpt_path(cfg, modality, regime_name);
        auto params = res.net->params();
        nn::save_checkpoint(ckpt, header, params);
        res.val_metrics.regime = regime_name;
        write_json(cfg.out() / "classifiers" / (modality + "_" + regime_name + "_val.json"),
                   res.val_metrics.to_json());
        produced.push_back(ckpt);
    }
    write_stage(cfg, "train-unimodal-" + classify::to_string(regime), produced);
}

// ---------------------------------------------------------------------------
// train-multimodal

namespace {

// Eyes holding all pipeline modalities with a known label; one record per eye
// with the unimodal p_neg scores of the given source regime.
std::vector<classify::PredictionRecord> fusion_records(const ExperimentConfig& cfg,
                                                       const dataman::DatasetManifest& m,
                                                       const std::string& source_regime,
                                                       Split split, bool with_metadata) {
    const auto& mods = dataman::pipeline_modalities();
    std::map<std::string, std::map<std::string, const dataman::ImageRecord*>> by_eye;
    for (const auto& r : m.records) {
        if (r.provenance != Provenance::REAL || r.label == Label::UNKNOWN) continue;
        if (m.splits.of(r.family_id) != split) continue;
        by_eye[r.eye_id][r.modality] = &r;
    }

    std::vector<std::string> eyes;
    for (const auto& [eye, per_mod] : by_eye) {
        bool complete = true;
        for (const auto& mod : mods)
            if (!per_mod.count(mod)) complete = false;
        if (complete) eyes.push_back(eye);
    }

    std::map<std::string, classify::PredictionRecord> recs;
    for (const auto& eye : eyes) {
        classify::PredictionRecord pr;
        pr.eye_id = eye;
        const auto* any = by_eye[eye].begin()->second;
        pr.y_pos = any->label == Label::POS ? 1 : 0;
        if (with_metadata) {
            auto it = m.metadata.find(any->patient_id);
            if (it == m.metadata.end())
                raise("fusion: missing metadata for patient " + any->patient_id);
            pr.metadata = dataman::encode_metadata(it->second);
        }
        recs[eye] = std::move(pr);
    }

    for (const auto& mod : mods) {
        auto net = load_classifier_ckpt(classifier_ckpt_path(cfg, mod, source_regime), nullptr);
        std::vector<Image> images;
        std::vector<std::string> ids;
        for (const auto& eye : eyes) {
            images.push_back(load_preprocessed(cfg, *by_eye[eye][mod]));
            ids.push_back(eye);
        }
        auto p = classify::predict_p_neg(*net, images);
        for (size_t i = 0; i < ids.size(); ++i) recs[ids[i]].p_neg[mod] = p[i];
    }

    std::vector<classify::PredictionRecord> out;
    for (const auto& eye : eyes) out.push_back(recs[eye]);
    return out;
}

std::string fusion_tag(const std::string& source_regime, bool meta) {
    return source_regime + (meta ? "_meta" : "_nometa");
}

void save_prediction_table(const fs::path& path,
                           const std::vector<classify::PredictionRecord>& recs) {
    fs::create_directories(path.parent_path());
    std::ofstream f(path);
    for (const auto& r : recs)
        for (const auto& [mod, p] : r.p_neg)
            f << r.eye_id << '\t' << mod << '\t' << p << '\t' << (r.y_pos ? "POS" : "NEG") << '\n';
}

}  // namespace

void stage_train_multimodal(const ExperimentConfig& cfg, bool use_metadata,
                            const std::string& source_regime) {
    require_stage(cfg, "train-unimodal-" + source_regime);
    auto m = load_run_manifest(cfg);

    auto train = fusion_records(cfg, m, source_regime, Split::TRAIN, use_metadata);
    auto val = fusion_records(cfg, m, source_regime, Split::VAL, use_metadata);
    if (train.empty() || val.empty())
        raise("train-multimodal: no eyes hold all four modalities in a split");

    classify::FusionConfig fc;
    fc.use_metadata = use_metadata;
    fc.hidden = cfg.fusion.hidden;
    fc.epochs = cfg.fusion.epochs;
    fc.lr = cfg.fusion.lr;
    fc.batch_size = cfg.fusion.batch_size;
    fc.focal_gamma = cfg.classifier.focal_gamma;
    fc.focal_alpha = cfg.classifier.focal_alpha;
    fc.seed = stage_seed(cfg, "fusion." + fusion_tag(source_regime, use_metadata));

    auto res = classify::train_multimodal(train, val, fc);

    std::string tag = fusion_tag(source_regime, use_metadata);
    fs::create_directories(cfg.out() / "fusion");
    save_prediction_table(cfg.out() / "fusion" / ("scores_" + source_regime + "_train.tsv"), train);
    save_prediction_table(cfg.out() / "fusion" / ("scores_" + source_regime + "_val.tsv"), val);

    json header = {{"model", "fusion"},
                   {"source_regime", source_regime},
                   {"use_metadata", use_metadata},
                   {"hidden", cfg.fusion.hidden},
                   {"modalities", dataman::pipeline_modalities()}};
    std::string ckpt = (cfg.out() / "fusion" / (tag + ".ckpt")).string();
    auto params = res.model.params();
    nn::save_checkpoint(ckpt, header, params);
    res.val_metrics.regime = source_regime;
    write_json(cfg.out() / "fusion" / (tag + "_val.json"), res.val_metrics.to_json());
    write_stage(cfg, "train-multimodal-" + tag, {ckpt});
}

// ---------------------------------------------------------------------------
// evaluate

namespace {

classify::FusionModel load_fusion(const ExperimentConfig& cfg, const std::string& tag,
                                  json* header_out) {
    std::string path = (cfg.out() / "fusion" / (tag + ".ckpt")).string();
    json h = nn::read_checkpoint_header(path);
    classify::FusionConfig fc;
    fc.use_metadata = h.at("use_metadata");
    fc.hidden = h.at("hidden").get<std::vector<int>>();
    fc.modalities = h.at("modalities").get<std::vector<std::string>>();
    classify::FusionModel model(fc, 0);
    auto params = model.params();
    nn::load_checkpoint(path, params);
    if (header_out) *header_out = h;
    return model;
}

void eval_unimodal(const ExperimentConfig& cfg, const dataman::DatasetManifest& m,
                   const std::string& modality, const std::string& regime, Split split,
                   const std::string& split_name, json& index) {
    std::string ckpt = classifier_ckpt_path(cfg, modality, regime);
    if (!fs::exists(ckpt)) return;
    auto net = load_classifier_ckpt(ckpt, nullptr);
    auto data = load_split_images(cfg, m, modality, split);
    if (data.size() == 0) return;
    auto p_neg = classify::predict_p_neg(*net, data.images);
    classify::save_predictions(
        (cfg.out() / "eval" / ("pred_" + modality + "_" + regime + "_" + split_name + ".tsv")).string(),
        modality, data.eye_ids, p_neg, data.y_pos);
    auto metrics = classify::metrics_from_p_neg(p_neg, data.y_pos);
    metrics.split = split_name;
    metrics.regime = regime;
    std::string name = "metrics_" + modality + "_" + regime + "_" + split_name + ".json";
    write_json(cfg.out() / "eval" / name, metrics.to_json());
    index["unimodal"][modality][regime][split_name] = metrics.to_json();
}

void eval_fusion(const ExperimentConfig& cfg, const dataman::DatasetManifest& m,
                 const std::string& source_regime, bool meta, Split split,
                 const std::string& split_name, json& index) {
    std::string tag = fusion_tag(source_regime, meta);
    if (!fs::exists(cfg.out() / "fusion" / (tag + ".ckpt"))) return;
    auto model = load_fusion(cfg, tag, nullptr);
    auto recs = fusion_records(cfg, m, source_regime, split, meta);
    if (recs.empty()) return;
    auto p_neg = model.predict_p_neg(recs);
    std::vector<int> y(recs.size());
    std::vector<std::string> eyes(recs.size());
    for (size_t i = 0; i < recs.size(); ++i) {
        y[i] = recs[i].y_pos;
        eyes[i] = recs[i].eye_id;
    }
    classify::save_predictions(
        (cfg.out() / "eval" / ("pred_fusion_" + tag + "_" + split_name + ".tsv")).string(),
        "MULTI", eyes, p_neg, y);
    auto metrics = classify::metrics_from_p_neg(p_neg, y);
    metrics.split = split_name;
    metrics.regime = source_regime;
    write_json(cfg.out() / "eval" / ("metrics_fusion_" + tag + "_" + split_name + ".json"),
               metrics.to_json());
    index["multimodal"][meta ? "with_metadata" : "no_metadata"][source_regime][split_name] =
        metrics.to_json();
}

}  // namespace

void stage_evaluate(const ExperimentConfig& cfg) {
    require_stage(cfg, "prepare");
    auto m = load_run_manifest(cfg);
    fs::create_directories(cfg.out() / "eval");
    json index;
    for (const auto& modality : run_modalities(m))
        for (const std::string regime : {"real", "synth", "pretrained"})
            for (auto [split, name] :
                 {std::pair{Split::VAL, "val"}, std::pair{Split::TEST, "test"}})
                eval_unimodal(cfg, m, modality, regime, split, name, index);
    for (const std::string source : {"real", "pretrained"})
        for (bool meta : {false, true})
            for (auto [split, name] : {std::pair{Split::VAL, "val"}, std::pair{Split::TEST, "test"}})
                eval_fusion(cfg, m, source, meta, split, name, index);
    write_json(cfg.out() / "eval" / "index.json", index);
    write_stage(cfg, "evaluate", {"eval/index.json"});
}

// ---------------------------------------------------------------------------
// explain

void stage_explain(const ExperimentConfig& cfg) {
    require_stage(cfg, "prepare");
    require_stage(cfg, "gate");
    auto m = load_run_manifest(cfg);
    fs::create_directories(cfg.out() / "explain");

    std::vector<std::string> produced;
    for (const auto& modality : run_modalities(m)) {
        for (const std::string regime : {"real", "synth", "pretrained"}) {
            std::string ckpt = classifier_ckpt_path(cfg, modality, regime);
            if (!fs::exists(ckpt)) continue;
            auto net = load_classifier_ckpt(ckpt, nullptr);

            auto test = load_split_images(cfg, m, modality, Split::TEST);
            auto synth = load_gated_synth(cfg, modality);
            auto pick = [](const classify::LabeledImages& set, int y) -> const Image* {
                for (size_t i = 0; i < set.size(); ++i)
                    if (set.y_pos[i] == y) return &set.images[i];
                return nullptr;
            };
            struct Want {
                const Image* img;
                std::string caption;
            };
            std::vector<Want> want = {{pick(test, 1), "real POS"},
                                      {pick(synth, 1), "synth POS"},
                                      {pick(test, 0), "real NEG"},
                                      {pick(synth, 0), "synth NEG"}};
            std::vector<explain::SheetCell> cells;
            int cell_idx = 0;
            for (const auto& w : want) {
                if (!w.img) continue;
                Tensor x({1, 3, w.img->height, w.img->width});
                dataman::fill_tensor_channels(*w.img, x, 0, 3);
                auto cam = explain::gradcam(*net, x, 0);
                cells.push_back({*w.img, cam.heatmap, w.caption});
                char fn[160];
                std::snprintf(fn, sizeof fn, "heat_%s_%s_%d.npy", modality.c_str(), regime.c_str(),
                              cell_idx++);
                std::vector<int> shape = {cam.heatmap.height, cam.heatmap.width};
                write_npy((cfg.out() / "explain" / fn).string(), shape, cam.heatmap.pix);
            }
            if (cells.empty()) continue;
            std::string sheet =
                (cfg.out() / "explain" / ("cams_" + modality + "_" + regime + ".png")).string();
            explain::write_cam_sheet(sheet, cells);
            produced.push_back(sheet);
        }
    }
    write_stage(cfg, "explain", produced);
}

// ---------------------------------------------------------------------------
// report

void stage_report(const ExperimentConfig& cfg) {
    require_stage(cfg, "evaluate");
    require_stage(cfg, "audit");
    json index = read_json(cfg.out() / "eval" / "index.json");

    fs::create_directories(cfg.out() / "report" / "plots");
    const std::vector<std::string> metrics = {"aupr", "auroc", "f1", "sensitivity", "specificity"};
    const std::vector<std::string> regimes = {"real", "synth", "pretrained"};

    // long-form TSV: split, row, metric, real, synth, pretrained
    std::ofstream tsv(cfg.out() / "report" / "table2.tsv");
    tsv << "split\trow\tmetric\treal\tsynth\tpretrained\n";
    json grid;
    auto emit_row = [&](const std::string& split, const std::string& row_name, const json& cell) {
        for (const auto& metric : metrics) {
            tsv << split << '\t' << row_name << '\t' << metric;
            for (const auto& regime : regimes) {
                tsv << '\t';
                if (cell.contains(regime) && cell.at(regime).contains(split)) {
                    double v = cell.at(regime).at(split).at(metric);
                    tsv << v;
                    grid[split][row_name][metric][regime] = v;
                } else {
                    tsv << "-";
                    grid[split][row_name][metric][regime] = nullptr;
                }
            }
            tsv << '\n';
        }
    };

    for (const std::string split : {"val", "test"}) {
        if (index.contains("unimodal"))
            for (const auto& [modality, cell] : index.at("unimodal").items())
                emit_row(split, modality, cell);
        if (index.contains("multimodal"))
            for (const auto& [meta, cell] : index.at("multimodal").items())
                emit_row(split, std::string("multimodal_") + meta, cell);
    }
    tsv.close();
    write_json(cfg.out() / "report" / "table2.json", grid);

    // fixed-width text rendition
    std::ofstream txt(cfg.out() / "report" / "table2.txt");
    for (const std::string split : {"val", "test"}) {
        txt << "== " << (split == std::string("val") ? "Validation" : "Test") << " ==\n";
        char line[256];
        std::snprintf(line, sizeof line, "%-24s", "row");
        txt << line;
        for (const auto& metric : metrics)
            for (const auto& regime : regimes) {
                std::snprintf(line, sizeof line, " %5s/%-4s", metric.substr(0, 5).c_str(),
                              regime.substr(0, 4).c_str());
                txt << line;
            }
        txt << '\n';
        if (grid.contains(split))
            for (const auto& [row_name, row] : grid.at(split).items()) {
                std::snprintf(line, sizeof line, "%-24s", row_name.c_str());
                txt << line;
                for (const auto& metric : metrics)
                    for (const auto& regime : regimes) {
                        const auto& v = row.at(metric).at(regime);
                        if (v.is_null()) std::snprintf(line, sizeof line, " %10s", "-");
                        else std::snprintf(line, sizeof line, " %10.3f", v.get<double>());
                        txt << line;
                    }
                txt << '\n';
            }
        txt << '\n';
    }
    txt.close();

    // ROC / PR curves for the test split from stored predictions
    std::vector<std::string> produced = {"report/table2.tsv", "report/table2.json",
                                         "report/table2.txt"};
    for (const auto& entry : fs::directory_iterator(cfg.out() / "eval")) {
        std::string name = entry.path().filename().string();
        if (name.rfind("pred_", 0) != 0 || name.find("_test.tsv") == std::string::npos) continue;
        std::ifstream f(entry.path());
        std::vector<double> p_pos;
        std::vector<int> y;
        std::string line;
        while (std::getline(f, line)) {
            std::vector<std::string> parts;
            size_t pos = 0;
            while ((pos = line.find('\t')) != std::string::npos) {
                parts.push_back(line.substr(0, pos));
                line.erase(0, pos + 1);
            }
            parts.push_back(line);
            if (parts.size() != 4) continue;
            p_pos.push_back(1.0 - std::stod(parts[2]));
            y.push_back(parts[3] == "POS" ? 1 : 0);
        }
        bool both = std::count(y.begin(), y.end(), 1) > 0 && std::count(y.begin(), y.end(), 0) > 0;
        if (p_pos.size() < 4 || !both) continue;

        std::string model = name.substr(5, name.size() - 5 - 9);
        // threshold sweep for the curves
        std::vector<size_t> order(p_pos.size());
        std::iota(order.begin(), order.end(), size_t{0});
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return p_pos[a] > p_pos[b]; });
        double pos_n = std::count(y.begin(), y.end(), 1), neg_n = static_cast<double>(y.size()) - pos_n;
        std::vector<std::pair<double, double>> roc = {{0, 0}}, pr;
        double tp = 0, fp = 0;
        for (size_t i = 0; i < order.size();) {
            double s = p_pos[order[i]];
            while (i < order.size() && p_pos[order[i]] == s) {
                (y[order[i]] == 1 ? tp : fp) += 1;
                ++i;
            }
            roc.push_back({fp / neg_n, tp / pos_n});
            pr.push_back({tp / pos_n, tp / (tp + fp)});
        }
        std::string rocp = (cfg.out() / "report" / "plots" / ("roc_" + model + ".png")).string();
        std::string prp = (cfg.out() / "report" / "plots" / ("pr_" + model + ".png")).string();
        plotting::plot_curves(rocp, "ROC " + model, "FPR", "TPR",
                              {{model, {0.2f, 0.4f, 0.8f}, roc}}, true);
        plotting::plot_curves(prp, "PR " + model, "RECALL", "PRECISION",
                              {{model, {0.8f, 0.4f, 0.2f}, pr}}, false);
        produced.push_back(rocp);
        produced.push_back(prp);
    }
    write_stage(cfg, "report", produced);
}

}  // namespace retsyn::pipeline

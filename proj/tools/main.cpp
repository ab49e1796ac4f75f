#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>

#include "retsyn/pipeline.hpp"

using retsyn::pipeline::ExperimentConfig;

namespace {

int dispatch(const std::string& cmd, const ExperimentConfig& cfg, const std::string& regime,
             bool metadata, const std::string& source) {
    using namespace retsyn::pipeline;
    if (cmd == "prepare") stage_prepare(cfg);
    else if (cmd == "train-ddpm") stage_train_ddpm(cfg);
    else if (cmd == "sample") stage_sample(cfg);
    else if (cmd == "train-filter") stage_train_filter(cfg);
    else if (cmd == "gate") stage_gate(cfg);
    else if (cmd == "audit") stage_audit(cfg);
    else if (cmd == "train-unimodal")
        stage_train_unimodal(cfg, retsyn::classify::regime_from_string(regime));
    else if (cmd == "train-multimodal") stage_train_multimodal(cfg, metadata, source);
    else if (cmd == "evaluate") stage_evaluate(cfg);
    else if (cmd == "explain") stage_explain(cfg);
    else if (cmd == "report") stage_report(cfg);
    else return 1;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic-data-augmented retinal image classification pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string regime = "real";
    std::string source = "real";
    bool metadata = false;
    bool allow_mismatch = false;

    const char* stages[] = {"prepare",        "train-ddpm", "sample",  "train-filter",
                            "gate",           "audit",      "train-unimodal",
                            "train-multimodal", "evaluate", "explain", "report"};
    for (const char* name : stages) {
        CLI::App* sub = app.add_subcommand(name, "run the " + std::string(name) + " stage");
        sub->add_option("--config", config_path, "experiment config (JSON)")->required();
        sub->add_flag("--allow-config-mismatch", allow_mismatch,
                      "run even when upstream stages used a different config");
        if (std::string(name) == "train-unimodal")
            sub->add_option("--regime", regime, "real | synth | pretrain");
        if (std::string(name) == "train-multimodal") {
            sub->add_flag("--metadata", metadata, "feed encoded age/sex into the fusion head");
            sub->add_option("--source", source, "unimodal source regime: real | pretrained");
        }
    }

    CLI11_PARSE(app, argc, argv);
    std::string cmd = app.get_subcommands().front()->get_name();

    try {
        ExperimentConfig cfg = ExperimentConfig::load(config_path);
        cfg.allow_config_mismatch = allow_mismatch;
        int rc = dispatch(cmd, cfg, regime, metadata, source);
        if (rc == 0) std::printf("[retsyn] %s: ok (out=%s)\n", cmd.c_str(), cfg.out_dir.c_str());
        return rc;
    } catch (const retsyn::ConfigError& e) {
        std::fprintf(stderr, "[retsyn] config error: %s\n", e.what());
        return 2;
    } catch (const retsyn::MissingArtifactError& e) {
        std::fprintf(stderr, "[retsyn] missing dependency: %s\n", e.what());
        return 3;
    } catch (const retsyn::NumericalError& e) {
        std::fprintf(stderr, "[retsyn] numerical failure: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "[retsyn] error: %s\n", e.what());
        return 1;
    }
}

// acam: adaptive-contrast experiments on synthetic ultrasound phantoms.
//
// Subcommands: synth, train, eval, ablate, transform, explain. Each run is
// driven by one JSON config (see acam::RunConfig in commands.hpp for the
// schema) plus optional flag overrides, and is a pure function of
// (config, inputs, seed): reruns produce bit-identical files.
//
// Exit codes: 0 success, 1 config error, 2 runtime error.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "acam/commands.hpp"

namespace {

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<std::string> backbone;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> batch_size;
    std::optional<double> lr;
    std::optional<bool> use_acam;
    std::optional<std::size_t> k;
    std::optional<bool> freeze_stage1;
};

void add_common(CLI::App* cmd, std::string& config_path, Overrides& ov) {
    cmd->add_option("-c,--config", config_path, "JSON run config")->required();
    cmd->add_option("--seed", ov.seed, "override root seed");
    cmd->add_option("--out-dir", ov.out_dir, "override output directory");
    cmd->add_option("--backbone", ov.backbone,
                    "override backbone (tiny-plain|tiny-res|tiny-wide)");
    cmd->add_option("--epochs", ov.epochs, "override training epochs");
    cmd->add_option("--batch-size", ov.batch_size, "override batch size");
    cmd->add_option("--lr", ov.lr, "override learning rate");
    cmd->add_flag("--use-acam,!--no-acam", ov.use_acam,
                  "override the contrast-module switch");
    cmd->add_option("--k", ov.k, "override the number of contrast views");
    cmd->add_flag("--freeze-stage1,!--no-freeze-stage1", ov.freeze_stage1,
                  "override the predictor freeze switch");
}

acam::RunConfig resolve(const std::string& config_path, const Overrides& ov) {
    acam::RunConfig cfg = acam::load_run_config(config_path);
    if (ov.seed) cfg.seed = *ov.seed;
    if (ov.out_dir) cfg.out_dir = *ov.out_dir;
    if (ov.backbone) cfg.backbone = *ov.backbone;
    if (ov.epochs) cfg.train.epochs = *ov.epochs;
    if (ov.batch_size) cfg.train.batch_size = *ov.batch_size;
    if (ov.lr) cfg.train.lr = *ov.lr;
    if (ov.use_acam) cfg.train.use_acam = *ov.use_acam;
    if (ov.k) cfg.train.k = *ov.k;
    if (ov.freeze_stage1) cfg.train.freeze_stage1 = *ov.freeze_stage1;
    cfg.validate();
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"adaptive-contrast classification experiments"};
    app.require_subcommand(1);

    std::string config_path, checkpoint, image, layer;
    int target_class = 0;
    bool verbose = false, no_acam_path = false;
    Overrides ov;

    auto* synth = app.add_subcommand("synth", "render the phantom dataset to disk");
    add_common(synth, config_path, ov);

    auto* train = app.add_subcommand("train", "train a model; writes checkpoint + history");
    add_common(train, config_path, ov);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    add_common(eval, config_path, ov);
    eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();

    auto* ablate = app.add_subcommand("ablate", "paired baseline-vs-ACAM seed sweep");
    add_common(ablate, config_path, ov);

    auto* transform = app.add_subcommand("transform", "export contrast views for one image");
    add_common(transform, config_path, ov);
    transform->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    transform->add_option("--image", image, "input PGM image")->required();
    transform->add_flag("-v,--verbose", verbose,
                        "log per-view stats and assert mean preservation");

    auto* explain = app.add_subcommand("explain", "export a Grad-CAM heatmap + overlay");
    add_common(explain, config_path, ov);
    explain->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    explain->add_option("--image", image, "input PGM image")->required();
    explain->add_option("--class", target_class, "target class index")->required();
    explain->add_option("--layer", layer, "conv layer name (default: last)");
    explain->add_flag("--skip-acam", no_acam_path,
                      "visualize the backbone gradient alone");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        std::cerr << "acam: config-error: " << e.what() << '\n';
        return 1;
    }

    try {
        acam::RunConfig cfg = resolve(config_path, ov);
        if (synth->parsed()) {
            acam::cmd_synth(cfg);
            std::cout << "wrote " << cfg.out_dir << "/manifest.csv\n";
        } else if (train->parsed()) {
            auto result = acam::cmd_train(cfg);
            const auto& last = result.history.back();
            std::cout << "epoch " << last.epoch << ": train_loss " << last.train_loss
                      << ", test_acc " << last.test_acc << '\n'
                      << "wrote " << cfg.out_dir << "/model.ackp\n";
        } else if (eval->parsed()) {
            auto report = acam::cmd_eval(cfg, checkpoint);
            std::cout << "accuracy " << report.report.accuracy << ", macro_f1 "
                      << report.report.macro_f1 << '\n'
                      << "wrote " << cfg.out_dir << "/report.json\n";
        } else if (ablate->parsed()) {
            auto rep = acam::cmd_ablate(cfg);
            for (const auto& r : rep.rows)
                std::cout << "seed " << r.seed << ": baseline " << r.baseline_acc
                          << ", acam " << r.acam_acc << ", delta "
                          << (r.delta >= 0 ? "+" : "") << r.delta << '\n';
            std::cout << "mean delta " << (rep.mean_delta >= 0 ? "+" : "")
                      << rep.mean_delta << '\n'
                      << "wrote " << cfg.out_dir << "/ablation.csv\n";
        } else if (transform->parsed()) {
            auto gains = acam::cmd_transform(cfg, checkpoint, image, verbose,
                                             verbose ? &std::cout : nullptr);
            std::cout << "wrote " << gains.size() << " views to " << cfg.out_dir << '\n';
        } else if (explain->parsed()) {
            auto hm = acam::cmd_explain(cfg, checkpoint, image, target_class, layer,
                                        !no_acam_path);
            std::cout << "wrote heatmap for class " << hm.target_class << " at layer "
                      << hm.layer_name << " to " << cfg.out_dir << '\n';
        }
    } catch (const acam::ConfigError& e) {
        std::cerr << "acam: config-error: " << e.what() << '\n';
        return 1;
    } catch (const std::domain_error& e) {
        std::cerr << "acam: config-error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "acam: runtime-error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

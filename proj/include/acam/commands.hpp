#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "acam/checkpoint.hpp"
#include "acam/contrast.hpp"
#include "acam/data.hpp"
#include "acam/gradcam.hpp"
#include "acam/metrics.hpp"
#include "acam/train.hpp"

namespace acam {

// Raised for anything wrong with the run configuration (as opposed to a
// failure while executing a valid one). The CLI maps it to exit code 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One config document drives every subcommand. JSON schema:
//   seed: uint            root seed; module seeds are derived from it
//   out_dir: string       output directory, created if missing
//   data:                 exactly one of:
//     phantom: {num_classes, images_per_class, height, width, contrast_low,
//               contrast_high, speckle_strength, images_per_patient}
//     manifest: string    manifest CSV path (images beside it)
//   split: {train_fraction}
//   backbone: string      tiny-plain | tiny-res | tiny-wide
//   train: {epochs, batch_size, lr, use_acam, k, freeze_stage1}
//   range: {alpha_min, alpha_max}
//   ablate: {seeds: [uint, ...]}
// Seed derivation: phantoms use derive_seed(seed, 10), the split uses
// derive_seed(seed, 11), training consumes the root seed directly (and
// derives its own sub-seeds for the two weight initializations and the
// per-epoch batch shuffles).
struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    std::optional<PhantomSpec> phantom;
    std::optional<std::string> manifest;
    double train_fraction = 0.7;
    std::string backbone = "tiny-res";
    TrainConfig train;
    std::vector<std::uint64_t> ablate_seeds{0, 1, 2, 3, 4};

    void validate() const {
        if (phantom.has_value() == manifest.has_value())
            throw ConfigError("config: exactly one data source required "
                              "(data.phantom or data.manifest)");
        if (phantom) {
            try {
                phantom->validate();
            } catch (const std::exception& e) {
                throw ConfigError(std::string("config: ") + e.what());
            }
        }
        if (!(train_fraction > 0.0) || !(train_fraction < 1.0))
            throw ConfigError("config: split.train_fraction must be in (0,1)");
        try {
            backbone_config(backbone);
            train.validate();
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
        if (ablate_seeds.empty())
            throw ConfigError("config: ablate.seeds must name at least 1 seed");
        if (out_dir.empty()) throw ConfigError("config: out_dir must be set");
    }
};

namespace detail {

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

} // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using detail::get_or;
    RunConfig cfg;
    cfg.seed = get_or<std::uint64_t>(j, "seed", 0);
    cfg.out_dir = get_or<std::string>(j, "out_dir", "out");
    if (j.contains("data")) {
        const auto& d = j.at("data");
        if (d.contains("phantom")) {
            const auto& p = d.at("phantom");
            PhantomSpec spec;
            spec.num_classes = get_or<std::size_t>(p, "num_classes", spec.num_classes);
            spec.images_per_class =
                get_or<std::size_t>(p, "images_per_class", spec.images_per_class);
            spec.height = get_or<std::size_t>(p, "height", spec.height);
            spec.width = get_or<std::size_t>(p, "width", spec.width);
            spec.contrast_low = get_or<double>(p, "contrast_low", spec.contrast_low);
            spec.contrast_high = get_or<double>(p, "contrast_high", spec.contrast_high);
            spec.speckle_strength =
                get_or<double>(p, "speckle_strength", spec.speckle_strength);
            spec.images_per_patient =
                get_or<std::size_t>(p, "images_per_patient", spec.images_per_patient);
            cfg.phantom = spec;
        }
        if (d.contains("manifest"))
            cfg.manifest = d.at("manifest").get<std::string>();
    }
    if (j.contains("split"))
        cfg.train_fraction = get_or<double>(j.at("split"), "train_fraction", 0.7);
    cfg.backbone = get_or<std::string>(j, "backbone", cfg.backbone);
    if (j.contains("train")) {
        const auto& t = j.at("train");
        cfg.train.epochs = get_or<std::size_t>(t, "epochs", cfg.train.epochs);
        cfg.train.batch_size = get_or<std::size_t>(t, "batch_size", cfg.train.batch_size);
        cfg.train.lr = get_or<double>(t, "lr", cfg.train.lr);
        cfg.train.use_acam = get_or<bool>(t, "use_acam", cfg.train.use_acam);
        cfg.train.k = get_or<std::size_t>(t, "k", cfg.train.k);
        cfg.train.freeze_stage1 =
            get_or<bool>(t, "freeze_stage1", cfg.train.freeze_stage1);
    }
    if (j.contains("range")) {
        const auto& r = j.at("range");
        cfg.train.range.alpha_min = get_or<double>(r, "alpha_min", 1.0);
        cfg.train.range.alpha_max = get_or<double>(r, "alpha_max", 3.0);
    }
    if (j.contains("ablate"))
        cfg.ablate_seeds = get_or<std::vector<std::uint64_t>>(
            j.at("ablate"), "seeds", cfg.ablate_seeds);
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
    return parse_run_config(j);
}

namespace detail {

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create directory " + dir + ": " +
                                     ec.message());
}

// Materializes the configured data source, with the split applied.
inline Dataset prepare_dataset(const RunConfig& cfg) {
    Dataset ds;
    if (cfg.phantom) {
        PhantomSpec spec = *cfg.phantom;
        spec.seed = derive_seed(cfg.seed, 10);
        ds = generate_phantoms(spec);
    } else {
        auto dir = std::filesystem::path(*cfg.manifest).parent_path().string();
        ds = load_dataset(*cfg.manifest, dir.empty() ? "." : dir);
    }
    bool has_split = false;
    for (const auto& r : ds.records)
        if (r.split != Split::unassigned) { has_split = true; break; }
    if (!has_split)
        patient_split(ds.records, cfg.train_fraction, derive_seed(cfg.seed, 11));
    return ds;
}

} // namespace detail

// synth: render the phantom dataset to out_dir/images plus a manifest CSV.
inline void cmd_synth(const RunConfig& cfg) {
    cfg.validate();
    if (!cfg.phantom) throw ConfigError("synth: config must use a phantom data source");
    auto ds = detail::prepare_dataset(cfg);
    detail::ensure_dir(cfg.out_dir + "/images");
    for (const auto& img : ds.images)
        write_pgm(cfg.out_dir + "/images/" + img.id + ".pgm", img);
    save_manifest(cfg.out_dir + "/manifest.csv", ds.records);
}

// train: fit the configured model and write model.ackp + history.csv.
inline TrainResult cmd_train(const RunConfig& cfg) {
    cfg.validate();
    auto ds = detail::prepare_dataset(cfg);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    std::size_t classes = 0;
    for (const auto& r : ds.records)
        classes = std::max(classes, static_cast<std::size_t>(r.label) + 1);
    auto result = train_model(tc, backbone_config(cfg.backbone, 1, classes), ds);

    detail::ensure_dir(cfg.out_dir);
    nlohmann::json meta;
    meta["backbone"] = backbone_config_json(result.model.config);
    meta["seed"] = cfg.seed;
    meta["use_acam"] = tc.use_acam;
    meta["k"] = tc.k;
    meta["range"] = {{"alpha_min", tc.range.alpha_min},
                     {"alpha_max", tc.range.alpha_max}};
    auto tensors = pack_classifier(result.model);
    if (result.predictor)
        for (auto& [name, t] : pack_predictor(*result.predictor))
            tensors.emplace_back(name, std::move(t));
    save_checkpoint(cfg.out_dir + "/model.ackp", meta, tensors);
    save_history(cfg.out_dir + "/history.csv", result.history);
    return result;
}

// Restores (model, optional predictor, range) from a checkpoint file.
struct LoadedModel {
    Classifier<float> model;
    std::optional<PredictorWeights<float>> predictor;
    RangeSpec range;
};

inline LoadedModel load_model(const std::string& checkpoint_path) {
    auto ckpt = load_checkpoint(checkpoint_path);
    LoadedModel out;
    out.model = unpack_classifier(ckpt);
    if (ckpt.meta.value("use_acam", false)) out.predictor = unpack_predictor(ckpt);
    if (ckpt.meta.contains("range")) {
        out.range.alpha_min = ckpt.meta["range"].value("alpha_min", 1.0);
        out.range.alpha_max = ckpt.meta["range"].value("alpha_max", 3.0);
    }
    return out;
}

// eval: score the test split of the configured data source with a saved
// model; writes report.json, per_class.csv, confusion.csv, and curve CSVs.
inline EvalReport cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path) {
    cfg.validate();
    auto lm = load_model(checkpoint_path);
    auto ds = detail::prepare_dataset(cfg);
    std::vector<std::size_t> test_idx;
    for (std::size_t i = 0; i < ds.records.size(); ++i)
        if (ds.records[i].split == Split::test) test_idx.push_back(i);
    if (test_idx.empty()) throw std::runtime_error("eval: no test records");

    TrainConfig tc = cfg.train;
    tc.range = lm.range;
    auto report = evaluate(lm.model, lm.predictor, tc, ds.images, test_idx);

    detail::ensure_dir(cfg.out_dir);
    std::ofstream jf(cfg.out_dir + "/report.json");
    if (!jf) throw std::runtime_error("cannot write " + cfg.out_dir + "/report.json");
    jf << report_to_json(report).dump(2) << '\n';
    write_class_report_csv(cfg.out_dir + "/per_class.csv", report.report);
    write_confusion_csv(cfg.out_dir + "/confusion.csv", report.cm);
    write_curves_csv(cfg.out_dir, report);
    return report;
}

struct AblationRow {
    std::uint64_t seed = 0;
    double baseline_acc = 0.0;
    double acam_acc = 0.0;
    double delta = 0.0;
};

struct AblationReport {
    std::vector<AblationRow> rows;
    double mean_baseline = 0.0, mean_acam = 0.0, mean_delta = 0.0;
};

// ablate: paired baseline-vs-ACAM runs over the configured seed list, all
// other settings identical. Writes ablation.csv and ablation.json. The
// accuracy compared is the best test accuracy over the run. When
// `force_acam` is set, both arms run with that switch (a control whose
// deltas are exactly zero).
inline AblationReport cmd_ablate(const RunConfig& cfg,
                                 std::optional<bool> force_acam = std::nullopt) {
    cfg.validate();
    AblationReport rep;
    for (std::uint64_t seed : cfg.ablate_seeds) {
        RunConfig run = cfg;
        run.seed = seed;
        AblationRow row;
        row.seed = seed;
        auto ds = detail::prepare_dataset(run);
        for (bool use_acam : {false, true}) {
            TrainConfig tc = run.train;
            tc.seed = seed;
            tc.use_acam = force_acam.value_or(use_acam);
            std::size_t classes = 0;
            for (const auto& r : ds.records)
                classes = std::max(classes, static_cast<std::size_t>(r.label) + 1);
            auto result = train_model(tc, backbone_config(run.backbone, 1, classes), ds);
            double acc = 0.0;
            for (const auto& rec : result.history) acc = std::max(acc, rec.test_acc);
            (use_acam ? row.acam_acc : row.baseline_acc) = acc;
        }
        row.delta = row.acam_acc - row.baseline_acc;
        rep.rows.push_back(row);
    }
    const double n = static_cast<double>(rep.rows.size());
    for (const auto& r : rep.rows) {
        rep.mean_baseline += r.baseline_acc / n;
        rep.mean_acam += r.acam_acc / n;
        rep.mean_delta += r.delta / n;
    }

    detail::ensure_dir(cfg.out_dir);
    std::ofstream f(cfg.out_dir + "/ablation.csv");
    if (!f) throw std::runtime_error("cannot write " + cfg.out_dir + "/ablation.csv");
    f << "seed,baseline_acc,acam_acc,delta\n";
    char line[128];
    for (const auto& r : rep.rows) {
        std::snprintf(line, sizeof line, "%llu,%.6f,%.6f,%+.6f\n",
                      static_cast<unsigned long long>(r.seed), r.baseline_acc,
                      r.acam_acc, r.delta);
        f << line;
    }
    std::snprintf(line, sizeof line, "mean,%.6f,%.6f,%+.6f\n", rep.mean_baseline,
                  rep.mean_acam, rep.mean_delta);
    f << line;

    nlohmann::json j;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rep.rows)
        j["rows"].push_back({{"seed", r.seed},
                             {"baseline_acc", r.baseline_acc},
                             {"acam_acc", r.acam_acc},
                             {"delta", r.delta}});
    j["mean_baseline"] = rep.mean_baseline;
    j["mean_acam"] = rep.mean_acam;
    j["mean_delta"] = rep.mean_delta;
    std::ofstream jf(cfg.out_dir + "/ablation.json");
    jf << j.dump(2) << '\n';
    return rep;
}

// transform: run one image through the trained predictor and export the K
// contrast views as view_00..view_{K-1}.pgm plus an alphas.txt sidecar
// (one gain per line, 6 decimals). With `verbose`, every view's mean is
// checked against the source mean to 1e-5 before clamping for export.
inline std::vector<double> cmd_transform(const RunConfig& cfg,
                                         const std::string& checkpoint_path,
                                         const std::string& image_path,
                                         bool verbose = false,
                                         std::ostream* log = nullptr) {
    cfg.validate();
    auto lm = load_model(checkpoint_path);
    if (!lm.predictor)
        throw std::runtime_error("transform: checkpoint has no contrast predictor "
                                 "(trained without use_acam)");
    GrayImage img = read_pgm(image_path);

    auto x = reshape(img.to_tensor<float>(), {1, 1, img.height, img.width});
    auto alphas = predict_gains(x, *lm.predictor, lm.range);
    auto views = contrast_views(x, alphas);

    detail::ensure_dir(cfg.out_dir);
    const std::size_t k = alphas.dim(1), hw = img.height * img.width;
    std::ofstream sidecar(cfg.out_dir + "/alphas.txt");
    if (!sidecar) throw std::runtime_error("cannot write " + cfg.out_dir + "/alphas.txt");
    std::vector<double> gains;
    double src_mean = 0.0;
    for (float v : img.pixels) src_mean += v;
    src_mean /= static_cast<double>(hw);
    char buf[64];
    for (std::size_t i = 0; i < k; ++i) {
        gains.push_back(alphas.data()[i]);
        std::snprintf(buf, sizeof buf, "%.6f\n", gains.back());
        sidecar << buf;

        GrayImage view;
        view.height = img.height;
        view.width = img.width;
        auto vd = views.data().subspan(i * hw, hw);
        view.pixels.assign(vd.begin(), vd.end());
        if (verbose) {
            double mean = 0.0;
            for (float v : view.pixels) mean += v;
            mean /= static_cast<double>(hw);
            if (std::abs(mean - src_mean) > 1e-5)
                throw std::runtime_error("transform: view " + std::to_string(i) +
                                         " mean drifted from source by " +
                                         std::to_string(std::abs(mean - src_mean)));
            if (log)
                *log << "view " << i << ": alpha " << gains.back() << ", mean "
                     << mean << " (source " << src_mean << ")\n";
        }
        std::snprintf(buf, sizeof buf, "/view_%02zu.pgm", i);
        write_pgm(cfg.out_dir + buf, view);
    }
    return gains;
}

// explain: Grad-CAM heatmap for one image/class/layer; writes the raw map
// (layer resolution) and a blended overlay at image resolution.
inline Heatmap cmd_explain(const RunConfig& cfg, const std::string& checkpoint_path,
                           const std::string& image_path, int target_class,
                           const std::string& layer = "",
                           bool through_acam = true) {
    cfg.validate();
    auto lm = load_model(checkpoint_path);
    GrayImage img = read_pgm(image_path);
    auto hm = grad_cam(lm.model, lm.predictor, lm.range, img, target_class, layer,
                       through_acam);

    detail::ensure_dir(cfg.out_dir);
    std::string stem = img.id.empty()
                           ? std::filesystem::path(image_path).stem().string()
                           : img.id;
    std::string tag = stem + "_c" + std::to_string(target_class) + "_" +
                      hm.layer_name;
    for (auto& ch : tag)
        if (ch == '.' || ch == '/') ch = '-';

    GrayImage raw;
    raw.height = hm.height;
    raw.width = hm.width;
    raw.pixels = hm.values;
    write_pgm(cfg.out_dir + "/heatmap_" + tag + ".pgm", raw);

    auto up = upsample_bilinear(hm.values, hm.height, hm.width, img.height, img.width);
    GrayImage overlay;
    overlay.height = img.height;
    overlay.width = img.width;
    overlay.pixels.resize(up.size());
    for (std::size_t i = 0; i < up.size(); ++i)
        overlay.pixels[i] = 0.5f * img.pixels[i] + 0.5f * up[i];
    write_pgm(cfg.out_dir + "/overlay_" + tag + ".pgm", overlay);
    return hm;
}

} // namespace acam

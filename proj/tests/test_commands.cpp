#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "acam/commands.hpp"

using namespace acam;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("acam_cmd_" + std::to_string(SplitMix64(
                    std::random_device{}()).next_u64() % 1000000));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& s) const { return (path / s).string(); }
};

RunConfig small_config(const TempDir& tmp, const std::string& sub) {
    RunConfig cfg;
    cfg.seed = 7;
    cfg.out_dir = tmp / sub;
    PhantomSpec spec;
    spec.images_per_class = 10;
    spec.images_per_patient = 5;
    spec.height = spec.width = 32;
    cfg.phantom = spec;
    cfg.backbone = "tiny-plain";
    cfg.train.epochs = 1;
    cfg.train.batch_size = 16;
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Brightness classifier: stem center tap, identity block, head that votes
// class 1 when the (subsampled) mean brightness clears 0.5.
void save_brightness_checkpoint(const std::string& path) {
    BackboneConfig bc;
    bc.name = "toy";
    bc.in_channels = 1;
    bc.num_classes = 2;
    bc.widths = {1};
    bc.blocks_per_stage = 1;
    bc.use_residual = false;
    auto m = build_backbone<float>(bc, 0);
    std::vector<float> stem_w(9, 0.f);
    stem_w[4] = 1.f;
    m.stem.w = Tensor<float>::from_data({1, 1, 3, 3}, std::move(stem_w));
    std::vector<float> blk_w(9, 0.f);
    blk_w[4] = 1.f;
    m.blocks[0][0][0].w = Tensor<float>::from_data({1, 1, 3, 3}, std::move(blk_w));
    m.head_w = Tensor<float>::from_data({2, 1}, {-1.f, 1.f});
    m.head_b = Tensor<float>::from_data({2}, {1.0f, 0.f});
    nlohmann::json meta;
    meta["backbone"] = backbone_config_json(bc);
    meta["use_acam"] = false;
    save_checkpoint(path, meta, pack_classifier(m));
}

void write_constant_image(const std::string& path, float value, std::size_t n = 16) {
    GrayImage img;
    img.height = img.width = n;
    img.pixels.assign(n * n, value);
    write_pgm(path, img);
}

} // namespace

TEST_CASE("config parsing applies defaults, nesting, and validation") {
    auto j = nlohmann::json::parse(R"({
        "seed": 3,
        "out_dir": "x",
        "data": {"phantom": {"images_per_class": 5, "height": 32, "width": 32}},
        "train": {"epochs": 2, "use_acam": true, "k": 4},
        "range": {"alpha_min": 1.5, "alpha_max": 2.5},
        "ablate": {"seeds": [1, 2]}
    })");
    auto cfg = parse_run_config(j);
    cfg.validate();
    REQUIRE(cfg.seed == 3);
    REQUIRE(cfg.phantom->images_per_class == 5);
    REQUIRE(cfg.phantom->num_classes == 6); // default preserved
    REQUIRE(cfg.train.epochs == 2);
    REQUIRE(cfg.train.use_acam);
    REQUIRE(cfg.train.k == 4);
    REQUIRE(cfg.train.lr == 0.001);
    REQUIRE(cfg.train.range.alpha_min == 1.5);
    REQUIRE(cfg.ablate_seeds == std::vector<std::uint64_t>{1, 2});

    REQUIRE_THROWS_AS(parse_run_config(nlohmann::json::parse(
                          R"({"data": {}})")).validate(),
                      ConfigError);
    auto both = nlohmann::json::parse(
        R"({"data": {"phantom": {}, "manifest": "m.csv"}})");
    REQUIRE_THROWS_AS(parse_run_config(both).validate(), ConfigError);
    auto bad_type = nlohmann::json::parse(R"({"train": {"epochs": "many"}})");
    REQUIRE_THROWS_AS(parse_run_config(bad_type), ConfigError);
}

TEST_CASE("synth writes one image per manifest row and reruns bit-identically") {
    TempDir tmp;
    auto cfg = small_config(tmp, "d1");
    cmd_synth(cfg);
    auto records = load_manifest(cfg.out_dir + "/manifest.csv");
    REQUIRE(records.size() == 60);
    for (const auto& r : records)
        REQUIRE(fs::exists(cfg.out_dir + "/images/" + r.image_path));

    auto cfg2 = small_config(tmp, "d2");
    cmd_synth(cfg2);
    REQUIRE(slurp(cfg.out_dir + "/manifest.csv") ==
            slurp(cfg2.out_dir + "/manifest.csv"));
    REQUIRE(slurp(cfg.out_dir + "/images/" + records[0].image_path) ==
            slurp(cfg2.out_dir + "/images/" + records[0].image_path));
}

TEST_CASE("invalid synth config fails before any file is written") {
    TempDir tmp;
    auto cfg = small_config(tmp, "never");
    cfg.phantom->images_per_class = 0;
    REQUIRE_THROWS_AS(cmd_synth(cfg), ConfigError);
    REQUIRE_FALSE(fs::exists(cfg.out_dir));
    cfg = small_config(tmp, "never2");
    cfg.phantom.reset();
    REQUIRE_THROWS_AS(cmd_synth(cfg), ConfigError);
    REQUIRE_FALSE(fs::exists(cfg.out_dir));
}

TEST_CASE("train with the contrast module checkpoints the predictor too") {
    TempDir tmp;
    auto cfg = small_config(tmp, "run");
    cfg.train.use_acam = true;
    cfg.train.k = 4;
    cmd_train(cfg);
    auto ckpt = load_checkpoint(cfg.out_dir + "/model.ackp");
    REQUIRE(ckpt.meta["use_acam"] == true);
    REQUIRE_NOTHROW(ckpt.at("acam.fc.w"));
    REQUIRE(ckpt.at("acam.fc.w").dim(0) == 4);
    auto lm = load_model(cfg.out_dir + "/model.ackp");
    REQUIRE(lm.predictor.has_value());
    REQUIRE(lm.model.config.in_channels == 4);
}

TEST_CASE("freeze_stage1 is visible as an unchanged predictor in the checkpoint") {
    TempDir tmp;
    auto cfg = small_config(tmp, "frozen");
    cfg.train.use_acam = true;
    cfg.train.k = 4;
    cfg.train.freeze_stage1 = true;
    cmd_train(cfg);
    auto lm = load_model(cfg.out_dir + "/model.ackp");
    auto fresh = init_predictor<float>(4, derive_seed(cfg.seed, 2));
    auto fp = fresh.params();
    auto lp = lm.predictor->params();
    for (std::size_t i = 0; i < fp.size(); ++i)
        REQUIRE(std::vector<float>(fp[i]->data().begin(), fp[i]->data().end()) ==
                std::vector<float>(lp[i]->data().begin(), lp[i]->data().end()));
}

TEST_CASE("train reruns produce identical checkpoints and history rows") {
    TempDir tmp;
    auto a = small_config(tmp, "a");
    auto b = small_config(tmp, "b");
    cmd_train(a);
    cmd_train(b);
    REQUIRE(slurp(a.out_dir + "/model.ackp") == slurp(b.out_dir + "/model.ackp"));
    // history matches except the wall-clock column
    auto strip_seconds = [](const std::string& csv) {
        std::stringstream in(csv), out;
        std::string line;
        while (std::getline(in, line))
            out << line.substr(0, line.rfind(',')) << '\n';
        return out.str();
    };
    REQUIRE(strip_seconds(slurp(a.out_dir + "/history.csv")) ==
            strip_seconds(slurp(b.out_dir + "/history.csv")));
}

TEST_CASE("eval on an oracle brightness model reports accuracy 1.0") {
    TempDir tmp;
    save_brightness_checkpoint(tmp / "oracle.ackp");
    fs::create_directories(tmp.path / "data");
    std::vector<ManifestRecord> records;
    for (int i = 0; i < 4; ++i) {
        ManifestRecord r;
        r.image_path = "img" + std::to_string(i) + ".pgm";
        r.label = i % 2;
        r.patient_id = "p" + std::to_string(i);
        r.split = Split::test;
        write_constant_image(tmp / ("data/" + r.image_path), r.label ? 0.9f : 0.1f);
        records.push_back(r);
    }
    save_manifest(tmp / "data/manifest.csv", records);

    RunConfig cfg;
    cfg.out_dir = tmp / "eval";
    cfg.manifest = tmp / "data/manifest.csv";
    auto report = cmd_eval(cfg, tmp / "oracle.ackp");
    REQUIRE(report.report.accuracy == 1.0);

    auto j = nlohmann::json::parse(slurp(cfg.out_dir + "/report.json"));
    REQUIRE(j["accuracy"] == 1.0);
    REQUIRE(j.contains("macro"));
    REQUIRE(j.contains("weighted"));

    // per-class CSV: header + exactly C rows
    std::stringstream csv(slurp(cfg.out_dir + "/per_class.csv"));
    std::string line;
    std::getline(csv, line);
    REQUIRE(line == "class,recall,precision,f1,support");
    std::size_t rows = 0;
    while (std::getline(csv, line)) ++rows;
    REQUIRE(rows == 2);
}

TEST_CASE("ablation control with both arms forced equal has zero deltas") {
    TempDir tmp;
    auto cfg = small_config(tmp, "ablate");
    cfg.phantom->images_per_class = 5;
    cfg.phantom->images_per_patient = 1;
    cfg.phantom->height = cfg.phantom->width = 16;
    cfg.ablate_seeds = {0, 1};
    auto rep = cmd_ablate(cfg, false);
    REQUIRE(rep.rows.size() == 2);
    for (const auto& r : rep.rows) {
        REQUIRE(r.delta == 0.0);
        REQUIRE(r.baseline_acc == r.acam_acc);
    }
    REQUIRE(rep.mean_delta == 0.0);

    // report structure: per-seed rows + a mean row
    std::stringstream csv(slurp(cfg.out_dir + "/ablation.csv"));
    std::string line;
    std::getline(csv, line);
    REQUIRE(line == "seed,baseline_acc,acam_acc,delta");
    std::vector<std::string> rows;
    while (std::getline(csv, line)) rows.push_back(line);
    REQUIRE(rows.size() == 3);
    REQUIRE(rows.back().rfind("mean,", 0) == 0);

    cfg.ablate_seeds.clear();
    REQUIRE_THROWS_AS(cmd_ablate(cfg), ConfigError);
}

TEST_CASE("transform exports K views and midpoint alphas for zero weights") {
    TempDir tmp;
    auto pred = init_predictor<float>(3, 0);
    for (auto* p : pred.params())
        std::fill(p->data().begin(), p->data().end(), 0.f);
    BackboneConfig bc = backbone_config("tiny-plain", 3, 6);
    auto m = build_backbone<float>(bc, 0);
    nlohmann::json meta;
    meta["backbone"] = backbone_config_json(bc);
    meta["use_acam"] = true;
    auto tensors = pack_classifier(m);
    for (auto& [name, t] : pack_predictor(pred)) tensors.emplace_back(name, std::move(t));
    save_checkpoint(tmp / "zero.ackp", meta, tensors);

    write_constant_image(tmp / "img.pgm", 0.4f);
    RunConfig cfg;
    cfg.out_dir = tmp / "views";
    cfg.phantom = PhantomSpec{};
    std::ostringstream log;
    auto gains = cmd_transform(cfg, tmp / "zero.ackp", tmp / "img.pgm", true, &log);
    REQUIRE(gains.size() == 3);
    for (double g : gains) REQUIRE(g == Catch::Approx(2.0).margin(1e-6));
    for (const char* name : {"view_00.pgm", "view_01.pgm", "view_02.pgm", "alphas.txt"})
        REQUIRE(fs::exists(cfg.out_dir + "/" + name));
    std::stringstream sidecar(slurp(cfg.out_dir + "/alphas.txt"));
    std::string line;
    while (std::getline(sidecar, line)) REQUIRE(line == "2.000000");
    REQUIRE(log.str().find("alpha") != std::string::npos);

    // baseline checkpoints cannot drive the transform
    save_brightness_checkpoint(tmp / "plain.ackp");
    REQUIRE_THROWS_WITH(cmd_transform(cfg, tmp / "plain.ackp", tmp / "img.pgm"),
                        Catch::Matchers::ContainsSubstring("no contrast predictor"));
}

TEST_CASE("explain writes a heatmap and overlay, rerun bit-identical") {
    TempDir tmp;
    save_brightness_checkpoint(tmp / "oracle.ackp");
    write_constant_image(tmp / "img.pgm", 0.8f);
    RunConfig cfg;
    cfg.out_dir = tmp / "cam1";
    cfg.phantom = PhantomSpec{};
    auto hm = cmd_explain(cfg, tmp / "oracle.ackp", tmp / "img.pgm", 1);
    REQUIRE(hm.layer_name == "stage0.block0");
    std::string tag = "img_c1_stage0-block0";
    REQUIRE(fs::exists(cfg.out_dir + "/heatmap_" + tag + ".pgm"));
    REQUIRE(fs::exists(cfg.out_dir + "/overlay_" + tag + ".pgm"));

    RunConfig cfg2 = cfg;
    cfg2.out_dir = tmp / "cam2";
    cmd_explain(cfg2, tmp / "oracle.ackp", tmp / "img.pgm", 1);
    REQUIRE(slurp(cfg.out_dir + "/heatmap_" + tag + ".pgm") ==
            slurp(cfg2.out_dir + "/heatmap_" + tag + ".pgm"));
    REQUIRE(slurp(cfg.out_dir + "/overlay_" + tag + ".pgm") ==
            slurp(cfg2.out_dir + "/overlay_" + tag + ".pgm"));

    REQUIRE_THROWS_WITH(cmd_explain(cfg, tmp / "oracle.ackp", tmp / "img.pgm", 1, "fc"),
                        Catch::Matchers::ContainsSubstring("eligible layers"));
}

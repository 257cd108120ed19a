#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "acam/gradcam.hpp"

using namespace acam;

namespace {

// Two-channel toy network with hand-settable taps:
//   stem (stride 2): ch0 = center tap  -> picks input(2y, 2x)
//                    ch1 = corner tap  -> picks input(2y-1, 2x-1)
//   stage0.block0:   per-channel identity
//   head:            class c reads channel c via GAP.
// The chosen layer feeds the logit through GAP alone, so the heatmap for
// class c is exactly ReLU(activation of channel c), max-normalized. All
// weights and pixels are dyadic, so the arithmetic is exact in float.
Classifier<float> toy_model() {
    BackboneConfig cfg;
    cfg.name = "toy";
    cfg.in_channels = 1;
    cfg.num_classes = 2;
    cfg.widths = {2};
    cfg.blocks_per_stage = 1;
    cfg.use_residual = false;
    auto m = build_backbone<float>(cfg, 1);

    std::vector<float> stem_w(2 * 1 * 9, 0.f);
    stem_w[4] = 1.f;      // ch0: kernel center
    stem_w[9] = 1.f;      // ch1: kernel top-left corner
    m.stem.w = Tensor<float>::from_data({2, 1, 3, 3}, std::move(stem_w));
    m.stem.b = Tensor<float>::zeros({2});

    std::vector<float> blk_w(2 * 2 * 9, 0.f);
    blk_w[0 * 18 + 0 * 9 + 4] = 1.f;  // ch0 <- ch0 center
    blk_w[1 * 18 + 1 * 9 + 4] = 1.f;  // ch1 <- ch1 center
    m.blocks[0][0][0].w = Tensor<float>::from_data({2, 2, 3, 3}, std::move(blk_w));
    m.blocks[0][0][0].b = Tensor<float>::zeros({2});

    m.head_w = Tensor<float>::from_data({2, 2}, {1.f, 0.f, 0.f, 1.f});
    m.head_b = Tensor<float>::zeros({2});
    return m;
}

GrayImage toy_image() {
    GrayImage img;
    img.height = img.width = 8;
    img.pixels.assign(64, 0.f);
    // even grid (channel 0 support)
    img.pixels[0 * 8 + 0] = 0.25f;
    img.pixels[2 * 8 + 2] = 1.0f;
    img.pixels[4 * 8 + 4] = 0.5f;
    // odd grid (channel 1 support), disjoint from the even grid
    img.pixels[5 * 8 + 5] = 1.0f;
    img.id = "toy";
    return img;
}

GrayImage random_image(std::uint64_t seed, std::size_t n = 16) {
    SplitMix64 rng(seed);
    GrayImage img;
    img.height = img.width = n;
    img.pixels.resize(n * n);
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform(0.0, 1.0));
    return img;
}

} // namespace

TEST_CASE("toy network matches the analytic channel-weighted heatmap") {
    auto m = toy_model();
    auto img = toy_image();
    auto hm = grad_cam(m, std::nullopt, RangeSpec{}, img, 0, "stage0.block0");
    REQUIRE(hm.height == 4);
    REQUIRE(hm.width == 4);
    std::vector<float> expected(16, 0.f);
    expected[0 * 4 + 0] = 0.25f;
    expected[1 * 4 + 1] = 1.0f;
    expected[2 * 4 + 2] = 0.5f;
    for (std::size_t i = 0; i < 16; ++i)
        REQUIRE(std::abs(hm.values[i] - expected[i]) < 1e-10);
}

TEST_CASE("orthogonal class channels give disjoint heatmap support") {
    auto m = toy_model();
    auto img = toy_image();
    auto h0 = grad_cam(m, std::nullopt, RangeSpec{}, img, 0, "stage0.block0");
    auto h1 = grad_cam(m, std::nullopt, RangeSpec{}, img, 1, "stage0.block0");
    // class 1 sees only the odd-grid pixel, mapped to cell (3,3)
    for (std::size_t i = 0; i < 16; ++i) {
        if (i == 3 * 4 + 3) REQUIRE(std::abs(h1.values[i] - 1.0f) < 1e-10);
        else REQUIRE(h1.values[i] == 0.0f);
        REQUIRE(h0.values[i] * h1.values[i] == 0.0f);
    }
    REQUIRE(h0.target_class == 0);
    REQUIRE(h1.target_class == 1);
}

TEST_CASE("zero image through a zero-bias network gives an all-zero heatmap") {
    auto m = build_backbone<float>(backbone_config("tiny-plain", 1, 6), 7);
    GrayImage img;
    img.height = img.width = 16;
    img.pixels.assign(256, 0.f);
    auto hm = grad_cam(m, std::nullopt, RangeSpec{}, img, 0);
    for (float v : hm.values) REQUIRE(v == 0.0f);
}

TEST_CASE("heatmap shape equals the chosen layer's spatial shape") {
    auto m = build_backbone<float>(backbone_config("tiny-plain", 1, 6), 7);
    auto img = random_image(3);
    auto hm_stem = grad_cam(m, std::nullopt, RangeSpec{}, img, 0, "stem");
    REQUIRE(hm_stem.height == 8); // 16x16 input, stride-2 stem
    REQUIRE(hm_stem.width == 8);
    REQUIRE(hm_stem.layer_name == "stem");
    auto hm_last = grad_cam(m, std::nullopt, RangeSpec{}, img, 0);
    REQUIRE(hm_last.layer_name == "stage2.block0");
    REQUIRE(hm_last.height == 2);
    REQUIRE(hm_last.values.size() == hm_last.height * hm_last.width);
}

TEST_CASE("heatmaps are nonnegative, max-normalized, and deterministic") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto m = build_backbone<float>(backbone_config("tiny-plain", 1, 6), seed);
        auto img = random_image(seed + 1000);
        auto hm = grad_cam(m, std::nullopt, RangeSpec{}, img,
                           static_cast<int>(seed % 6));
        float mx = 0.f;
        for (float v : hm.values) {
            REQUIRE(v >= 0.0f);
            mx = std::max(mx, v);
        }
        REQUIRE((mx == 0.0f || mx == 1.0f));
        auto hm2 = grad_cam(m, std::nullopt, RangeSpec{}, img,
                            static_cast<int>(seed % 6));
        REQUIRE(hm.values == hm2.values);
    }
}

TEST_CASE("the ACAM path is part of the visualized gradient unless excluded") {
    auto base = build_backbone<float>(backbone_config("tiny-plain", 1, 6), 5);
    auto m = adapt_stem(base, 4);
    auto pred = init_predictor<float>(4, 9);
    auto img = random_image(12);
    auto through = grad_cam(m, pred, RangeSpec{}, img, 2, "", true);
    auto around = grad_cam(m, pred, RangeSpec{}, img, 2, "", false);
    REQUIRE(through.values.size() == around.values.size());
    // both are valid heatmaps over the same grid
    for (float v : through.values) REQUIRE(v >= 0.0f);
    for (float v : around.values) REQUIRE(v >= 0.0f);
    // calls must leave the caller's parameters free of gradient state
    REQUIRE_FALSE(m.stem.w.requires_grad());
}

TEST_CASE("invalid layer or class is rejected with the eligible list") {
    auto m = build_backbone<float>(backbone_config("tiny-plain", 1, 6), 7);
    auto img = random_image(3);
    REQUIRE_THROWS_WITH(grad_cam(m, std::nullopt, RangeSpec{}, img, 0, "head"),
                        Catch::Matchers::ContainsSubstring("stem") &&
                        Catch::Matchers::ContainsSubstring("stage2.block0"));
    REQUIRE_THROWS_AS(grad_cam(m, std::nullopt, RangeSpec{}, img, 6),
                      std::out_of_range);
    REQUIRE_THROWS_AS(grad_cam(m, std::nullopt, RangeSpec{}, img, -1),
                      std::out_of_range);
}

TEST_CASE("bilinear upsampling preserves constants and is exact at 1:1") {
    std::vector<float> src{0.f, 1.f, 2.f, 3.f};
    auto same = upsample_bilinear(src, 2, 2, 2, 2);
    REQUIRE(same == src);
    std::vector<float> flat(9, 0.5f);
    auto up = upsample_bilinear(flat, 3, 3, 7, 5);
    REQUIRE(up.size() == 35);
    for (float v : up) REQUIRE(v == Catch::Approx(0.5f).margin(1e-7));
    // values stay inside the source range
    auto up2 = upsample_bilinear(src, 2, 2, 5, 5);
    for (float v : up2) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 3.0f);
    }
}

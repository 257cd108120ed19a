#pragma once

#include <map>
#include <string>
#include <vector>

#include "acam/ops.hpp"
#include "acam/rng.hpp"
#include "acam/tensor.hpp"

namespace acam {

// Desk-scale classifier family. The stem consumes either 1 channel (raw
// image baseline) or K channels (stacked contrast views); everything after
// the stem is identical between the two arms for a given config.
struct BackboneConfig {
    std::string name = "tiny-plain";
    std::size_t in_channels = 1;
    std::size_t num_classes = 6;
    std::vector<std::size_t> widths = {16, 32, 64};
    std::size_t blocks_per_stage = 1;
    bool use_residual = false;

    void validate() const {
        if (in_channels < 1) throw std::domain_error("BackboneConfig: in_channels must be >= 1");
        if (num_classes < 2) throw std::domain_error("BackboneConfig: num_classes must be >= 2");
        if (widths.empty()) throw std::domain_error("BackboneConfig: widths must be nonempty");
        for (std::size_t w : widths)
            if (w < 1) throw std::domain_error("BackboneConfig: widths must be positive");
    }
};

// Shipped configs: lightweight / traditional-residual / wider stand-ins.
inline BackboneConfig backbone_config(const std::string& name,
                                      std::size_t in_channels = 1,
                                      std::size_t num_classes = 6) {
    BackboneConfig cfg;
    cfg.name = name;
    cfg.in_channels = in_channels;
    cfg.num_classes = num_classes;
    if (name == "tiny-plain") {
        cfg.widths = {16, 32, 64};
        cfg.use_residual = false;
    } else if (name == "tiny-res") {
        cfg.widths = {16, 32, 64};
        cfg.use_residual = true;
    } else if (name == "tiny-wide") {
        cfg.widths = {24, 48, 96};
        cfg.use_residual = true;
    } else {
        throw std::domain_error("unknown backbone '" + name +
                                "' (available: tiny-plain, tiny-res, tiny-wide)");
    }
    return cfg;
}

template <typename T>
struct ConvLayer {
    Tensor<T> w, b;
};

// Stem (stride 2) -> stages of blocks with stride-2 downsampling between
// stages -> GAP -> FC head.
template <typename T>
struct Classifier {
    BackboneConfig config;
    ConvLayer<T> stem;
    std::vector<ConvLayer<T>> downs;                    // one per stage after the first
    std::vector<std::vector<std::vector<ConvLayer<T>>>> blocks; // [stage][block][conv]
    Tensor<T> head_w, head_b;

    std::vector<Tensor<T>*> params() {
        std::vector<Tensor<T>*> out{&stem.w, &stem.b};
        for (auto& d : downs) { out.push_back(&d.w); out.push_back(&d.b); }
        for (auto& stage : blocks)
            for (auto& block : stage)
                for (auto& c : block) { out.push_back(&c.w); out.push_back(&c.b); }
        out.push_back(&head_w);
        out.push_back(&head_b);
        return out;
    }

    void set_requires_grad(bool on = true) {
        for (auto* p : params()) p->set_requires_grad(on);
    }

    // Conv layer names eligible for activation capture, in forward order.
    std::vector<std::string> layer_names() const {
        std::vector<std::string> names{"stem"};
        for (std::size_t s = 0; s < config.widths.size(); ++s) {
            if (s > 0) names.push_back("stage" + std::to_string(s) + ".down");
            for (std::size_t j = 0; j < config.blocks_per_stage; ++j)
                names.push_back("stage" + std::to_string(s) + ".block" + std::to_string(j));
        }
        return names;
    }
};

namespace detail {

template <typename T>
ConvLayer<T> init_conv(std::size_t cout, std::size_t cin, SplitMix64& rng) {
    return {uniform_init<T>({cout, cin, 3, 3}, cin * 9, rng), Tensor<T>::zeros({cout})};
}

} // namespace detail

template <typename T>
Classifier<T> build_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    SplitMix64 rng(seed);
    Classifier<T> c;
    c.config = cfg;
    c.stem = detail::init_conv<T>(cfg.widths[0], cfg.in_channels, rng);
    c.blocks.resize(cfg.widths.size());
    for (std::size_t s = 0; s < cfg.widths.size(); ++s) {
        if (s > 0)
            c.downs.push_back(detail::init_conv<T>(cfg.widths[s], cfg.widths[s - 1], rng));
        for (std::size_t j = 0; j < cfg.blocks_per_stage; ++j) {
            std::vector<ConvLayer<T>> block;
            block.push_back(detail::init_conv<T>(cfg.widths[s], cfg.widths[s], rng));
            if (cfg.use_residual)
                block.push_back(detail::init_conv<T>(cfg.widths[s], cfg.widths[s], rng));
            c.blocks[s].push_back(std::move(block));
        }
    }
    c.head_w = detail::uniform_init<T>({cfg.num_classes, cfg.widths.back()},
                                       cfg.widths.back(), rng);
    c.head_b = Tensor<T>::zeros({cfg.num_classes});
    return c;
}

// Re-stems a 1-channel classifier for k input channels. Stem weights are
// replicated across the k channels and divided by k, so feeding k identical
// copies of an image reproduces the original stem pre-activations. All
// non-stem tensors are shared with the source classifier. k=1 returns the
// classifier unchanged.
template <typename T>
Classifier<T> adapt_stem(const Classifier<T>& c, std::size_t k) {
    if (k < 1) throw std::domain_error("adapt_stem: k must be >= 1");
    if (k == 1) return c;
    if (c.config.in_channels != 1)
        throw std::domain_error("adapt_stem: source classifier must have a 1-channel stem, has " +
                                std::to_string(c.config.in_channels));
    Classifier<T> out = c;
    out.config.in_channels = k;
    const std::size_t cout = c.stem.w.dim(0), kk = c.stem.w.dim(2) * c.stem.w.dim(3);
    std::vector<T> w(cout * k * kk);
    auto src = c.stem.w.data();
    for (std::size_t oc = 0; oc < cout; ++oc)
        for (std::size_t ic = 0; ic < k; ++ic)
            for (std::size_t i = 0; i < kk; ++i)
                w[(oc * k + ic) * kk + i] = src[oc * kk + i] / static_cast<T>(k);
    out.stem.w = Tensor<T>::from_data({cout, k, c.stem.w.dim(2), c.stem.w.dim(3)},
                                      std::move(w));
    out.stem.b = c.stem.b.detach_copy();
    return out;
}

// Forward pass to logits. When `activations` is given, every conv layer's
// post-activation output is recorded under its layer name.
template <typename T>
Tensor<T> forward_classify(Classifier<T>& c, Tensor<T> x,
                           std::map<std::string, Tensor<T>>* activations = nullptr) {
    if (x.ndim() != 4 || x.dim(1) != c.config.in_channels)
        throw ShapeError("forward_classify: expected input [B," +
                         std::to_string(c.config.in_channels) + ",H,W], got " +
                         shape_str(x.shape()));
    auto record = [&](const std::string& layer_name, const Tensor<T>& t) {
        if (activations) (*activations)[layer_name] = t;
    };
    Tensor<T> a = relu(conv2d(x, c.stem.w, c.stem.b, 2, 1));
    record("stem", a);
    for (std::size_t s = 0; s < c.config.widths.size(); ++s) {
        if (s > 0) {
            a = relu(conv2d(a, c.downs[s - 1].w, c.downs[s - 1].b, 2, 1));
            record("stage" + std::to_string(s) + ".down", a);
        }
        for (std::size_t j = 0; j < c.blocks[s].size(); ++j) {
            auto& block = c.blocks[s][j];
            if (c.config.use_residual) {
                Tensor<T> t = relu(conv2d(a, block[0].w, block[0].b, 1, 1));
                t = conv2d(t, block[1].w, block[1].b, 1, 1);
                a = relu(add(a, t));
            } else {
                a = relu(conv2d(a, block[0].w, block[0].b, 1, 1));
            }
            record("stage" + std::to_string(s) + ".block" + std::to_string(j), a);
        }
    }
    return linear(global_avg_pool(a), c.head_w, c.head_b);
}

} // namespace acam

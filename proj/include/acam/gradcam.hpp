#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "acam/backbone.hpp"
#include "acam/contrast.hpp"
#include "acam/ops.hpp"
#include "acam/train.hpp"

namespace acam {

// Nonnegative class-attention map over a conv layer's spatial grid,
// normalized so the maximum is 1 whenever the map is nonzero.
struct Heatmap {
    std::size_t height = 0, width = 0;
    std::vector<float> values;
    std::string layer_name;
    int target_class = 0;
};

namespace detail {

inline std::string join_names(const std::vector<std::string>& names) {
    std::string out;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (i) out += ", ";
        out += names[i];
    }
    return out;
}

} // namespace detail

// Grad-CAM over the named conv layer: channel weights are the spatial mean
// of d(logit_c)/d(activation), the map is ReLU of the weighted channel sum.
// When `through_acam` is false the predictor still produces the views but the
// visualized gradient path covers the backbone alone. Default layer "" picks
// the last conv layer.
inline Heatmap grad_cam(Classifier<float>& model,
                        std::optional<PredictorWeights<float>> predictor,
                        const RangeSpec& range, const GrayImage& image,
                        int target_class, std::string layer = "",
                        bool through_acam = true) {
    if (target_class < 0 ||
        static_cast<std::size_t>(target_class) >= model.config.num_classes)
        throw std::out_of_range("grad_cam: target class " +
                                std::to_string(target_class) + " outside [0," +
                                std::to_string(model.config.num_classes) + ")");
    auto names = model.layer_names();
    if (layer.empty()) layer = names.back();
    if (std::find(names.begin(), names.end(), layer) == names.end())
        throw std::invalid_argument("grad_cam: '" + layer +
                                    "' is not a conv layer; eligible layers: " +
                                    detail::join_names(names));

    // Work on clones so callers' grad buffers and flags are untouched.
    Classifier<float> m = clone_classifier(model);
    m.set_requires_grad();
    Tensor<float> x = image.to_tensor<float>();
    Tensor<float> input = reshape(x, {1, 1, image.height, image.width});
    Tensor<float> net_in = input;
    if (predictor) {
        PredictorWeights<float> p = clone_predictor(*predictor);
        if (through_acam) {
            p.set_requires_grad();
            net_in = acam_forward(input, p, range);
        } else {
            // cut the graph at the view stack: visualize the backbone alone
            net_in = acam_forward(input, p, range).detach_copy();
        }
    }

    std::map<std::string, Tensor<float>> acts;
    auto logits = forward_classify(m, net_in, &acts);
    Tensor<float>& act = acts.at(layer);

    // select logit[0, target_class]
    std::vector<float> onehot(logits.size(), 0.f);
    onehot[static_cast<std::size_t>(target_class)] = 1.f;
    auto mask = Tensor<float>::from_data(logits.shape(), std::move(onehot));
    sum(mul(logits, mask)).backward();

    const std::size_t ch = act.dim(1), h = act.dim(2), w = act.dim(3), hw = h * w;
    auto grad = act.grad();
    auto val = act.data();
    Heatmap out;
    out.height = h;
    out.width = w;
    out.layer_name = layer;
    out.target_class = target_class;
    out.values.assign(hw, 0.f);
    for (std::size_t k = 0; k < ch; ++k) {
        float wk = 0.f;
        for (std::size_t i = 0; i < hw; ++i) wk += grad[k * hw + i];
        wk /= static_cast<float>(hw);
        for (std::size_t i = 0; i < hw; ++i) out.values[i] += wk * val[k * hw + i];
    }
    float mx = 0.f;
    for (auto& v : out.values) {
        v = v > 0.f ? v : 0.f;
        mx = std::max(mx, v);
    }
    if (mx > 0.f)
        for (auto& v : out.values) v /= mx;
    return out;
}

// Bilinear upsample of a heatmap to the given size (for overlay export).
inline std::vector<float> upsample_bilinear(const std::vector<float>& src,
                                            std::size_t sh, std::size_t sw,
                                            std::size_t dh, std::size_t dw) {
    std::vector<float> dst(dh * dw);
    for (std::size_t y = 0; y < dh; ++y) {
        double fy = (dh == 1) ? 0.0
                              : (y + 0.5) * static_cast<double>(sh) / dh - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(sh - 1));
        std::size_t y0 = static_cast<std::size_t>(fy);
        std::size_t y1 = std::min(y0 + 1, sh - 1);
        double wy = fy - y0;
        for (std::size_t x = 0; x < dw; ++x) {
            double fx = (dw == 1) ? 0.0
                                  : (x + 0.5) * static_cast<double>(sw) / dw - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(sw - 1));
            std::size_t x0 = static_cast<std::size_t>(fx);
            std::size_t x1 = std::min(x0 + 1, sw - 1);
            double wx = fx - x0;
            double v = (1 - wy) * ((1 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1]) +
                       wy * ((1 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1]);
            dst[y * dw + x] = static_cast<float>(v);
        }
    }
    return dst;
}

} // namespace acam

#pragma once

#include <cmath>
#include <vector>

#include "acam/image.hpp"
#include "acam/ops.hpp"
#include "acam/rng.hpp"
#include "acam/tensor.hpp"

namespace acam {

// Clinically plausible contrast-gain interval. Predicted gains are mapped
// strictly inside (alpha_min, alpha_max) by a sigmoid, default 1..3.
struct RangeSpec {
    double alpha_min = 1.0;
    double alpha_max = 3.0;

    void validate() const {
        if (!(alpha_min > 0.0) || !(alpha_min < alpha_max))
            throw std::domain_error("RangeSpec requires 0 < alpha_min < alpha_max, got (" +
                                    std::to_string(alpha_min) + ", " +
                                    std::to_string(alpha_max) + ")");
    }
};

inline double image_mean(const GrayImage& img) {
    double acc = 0.0;
    for (float v : img.pixels) acc += v;
    return acc / static_cast<double>(img.pixels.size());
}

// Linear contrast transform about the per-image mean, in batch form:
// images [B,1,H,W], alphas [B,K] -> views [B,K,H,W] with
//   view[b,k] = alpha[b,k] * (I_b - mu_b) + mu_b,  mu_b = mean(I_b).
// The mean is part of the graph, so gradients flow through mu as well:
//   d(view_ij)/d(I_pq) = alpha * [i==p,j==q] + (1 - alpha)/(HW)
//   d(view_ij)/d(alpha) = I_ij - mu.
// Output is deliberately not clamped to [0,1]; clamping happens only on
// export for visualization.
template <typename T>
Tensor<T> contrast_views(Tensor<T> images, Tensor<T> alphas) {
    if (images.ndim() != 4 || images.dim(1) != 1)
        throw ShapeError("contrast_views: images must be [B,1,H,W], got " +
                         shape_str(images.shape()));
    if (alphas.ndim() != 2 || alphas.dim(0) != images.dim(0))
        throw ShapeError("contrast_views: alphas must be [B,K] with B=" +
                         std::to_string(images.dim(0)) + ", got " +
                         shape_str(alphas.shape()));
    for (T a : alphas.data())
        if (!(a > T(0)))
            throw std::domain_error("contrast_views: contrast gain must be > 0");
    const std::size_t b = images.dim(0), k = alphas.dim(1);
    const std::size_t h = images.dim(2), w = images.dim(3), hw = h * w;

    auto out = Tensor<T>::make_op(
        {b, k, h, w}, {images, alphas},
        [images, alphas, b, k, hw](std::span<const T> g, std::span<const T>) mutable {
            auto img = images.data();
            auto al = alphas.data();
            for (std::size_t bi = 0; bi < b; ++bi) {
                const T* ib = img.data() + bi * hw;
                T mu = T(0);
                for (std::size_t i = 0; i < hw; ++i) mu += ib[i];
                mu /= static_cast<T>(hw);
                for (std::size_t ki = 0; ki < k; ++ki) {
                    const T* gv = g.data() + (bi * k + ki) * hw;
                    T gsum = T(0);
                    for (std::size_t i = 0; i < hw; ++i) gsum += gv[i];
                    T a = al[bi * k + ki];
                    if (alphas.needs_grad()) {
                        T da = T(0);
                        for (std::size_t i = 0; i < hw; ++i) da += gv[i] * (ib[i] - mu);
                        alphas.grad_mut()[bi * k + ki] += da;
                    }
                    if (images.needs_grad()) {
                        T* di = images.grad_mut().data() + bi * hw;
                        T spread = (T(1) - a) * gsum / static_cast<T>(hw);
                        for (std::size_t i = 0; i < hw; ++i)
                            di[i] += a * gv[i] + spread;
                    }
                }
            }
        });

    auto img = images.data();
    auto al = alphas.data();
    auto y = out.data();
    for (std::size_t bi = 0; bi < b; ++bi) {
        const T* ib = img.data() + bi * hw;
        T mu = T(0);
        for (std::size_t i = 0; i < hw; ++i) mu += ib[i];
        mu /= static_cast<T>(hw);
        for (std::size_t ki = 0; ki < k; ++ki) {
            T a = al[bi * k + ki];
            T* v = y.data() + (bi * k + ki) * hw;
            if (a == T(1)) {
                // unit gain is the exact identity, bit for bit
                std::copy(ib, ib + hw, v);
            } else {
                for (std::size_t i = 0; i < hw; ++i) v[i] = a * (ib[i] - mu) + mu;
            }
        }
    }
    return out;
}

// Single-image, single-gain form: img [1,H,W] or [H,W] -> same spatial shape.
template <typename T>
Tensor<T> apply_contrast(Tensor<T> img, T alpha) {
    if (!(alpha > T(0)))
        throw std::domain_error("apply_contrast: alpha must be > 0, got " +
                                std::to_string(alpha));
    Shape spatial = img.shape();
    std::size_t h = img.dim(img.ndim() - 2), w = img.dim(img.ndim() - 1);
    auto views = contrast_views(reshape(img, {1, 1, h, w}),
                                Tensor<T>::from_data({1, 1}, {alpha}));
    return reshape(views, std::move(spatial));
}

// K views of one image; view k uses alphas[k], order preserved.
template <typename T>
Tensor<T> generate_views(Tensor<T> img, Tensor<T> alphas) {
    if (img.ndim() != 3 || img.dim(0) != 1)
        throw ShapeError("generate_views: img must be [1,H,W], got " +
                         shape_str(img.shape()));
    if (alphas.ndim() != 1)
        throw ShapeError("generate_views: alphas must be [K], got " +
                         shape_str(alphas.shape()));
    const std::size_t k = alphas.dim(0), h = img.dim(1), w = img.dim(2);
    auto views = contrast_views(reshape(img, {1, 1, h, w}),
                                reshape(alphas, {1, k}));
    return reshape(views, {k, h, w});
}

// Shallow texture predictor: Conv(1->8,3x3,s1,p1)+ReLU ->
// Conv(8->16,3x3,s2,p1)+ReLU -> GAP -> FC(16->K).
template <typename T>
struct PredictorWeights {
    Tensor<T> conv1_w, conv1_b;
    Tensor<T> conv2_w, conv2_b;
    Tensor<T> fc_w, fc_b;

    std::size_t num_gains() const { return fc_w.dim(0); }

    std::vector<Tensor<T>*> params() {
        return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc_w, &fc_b};
    }

    void set_requires_grad(bool on = true) {
        for (auto* p : params()) p->set_requires_grad(on);
    }
};

// Uniform +-sqrt(1/fan_in) weights, zero biases: raw scores start near 0,
// so initial gains sit near the range midpoint.
template <typename T>
PredictorWeights<T> init_predictor(std::size_t k, std::uint64_t seed) {
    if (k < 1) throw std::domain_error("init_predictor: K must be >= 1");
    SplitMix64 rng(seed);
    PredictorWeights<T> w;
    w.conv1_w = detail::uniform_init<T>({8, 1, 3, 3}, 9, rng);
    w.conv1_b = Tensor<T>::zeros({8});
    w.conv2_w = detail::uniform_init<T>({16, 8, 3, 3}, 8 * 9, rng);
    w.conv2_b = Tensor<T>::zeros({16});
    w.fc_w = detail::uniform_init<T>({k, 16}, 16, rng);
    w.fc_b = Tensor<T>::zeros({k});
    return w;
}

// Raw unbounded contrast scores z: [B,1,H,W] -> [B,K].
template <typename T>
Tensor<T> predict_raw(Tensor<T> batch, PredictorWeights<T>& w) {
    if (batch.ndim() != 4 || batch.dim(1) != 1)
        throw ShapeError("predict_raw: batch must be [B,1,H,W], got " +
                         shape_str(batch.shape()));
    if (batch.dim(2) < 8 || batch.dim(3) < 8)
        throw ShapeError("predict_raw: spatial size must be >= 8, got " +
                         shape_str(batch.shape()));
    auto h1 = relu(conv2d(batch, w.conv1_w, w.conv1_b, 1, 1));
    auto h2 = relu(conv2d(h1, w.conv2_w, w.conv2_b, 2, 1));
    return linear(global_avg_pool(h2), w.fc_w, w.fc_b);
}

// alpha = alpha_min + (alpha_max - alpha_min) * sigmoid(z); strictly inside
// the open interval and strictly increasing in z.
template <typename T>
Tensor<T> map_to_range(Tensor<T> z, const RangeSpec& range) {
    range.validate();
    auto mapped = affine(sigmoid(z), static_cast<T>(range.alpha_max - range.alpha_min),
                         static_cast<T>(range.alpha_min));
    // The sigmoid saturates to exactly 0 or 1 for large |z| in finite
    // precision; nudge such values to the nearest representable interior
    // point so the open-interval contract holds for any finite input. The
    // gradient passes through unchanged (it is already ~0 at saturation).
    const T lo = static_cast<T>(range.alpha_min);
    const T hi = static_cast<T>(range.alpha_max);
    auto out = Tensor<T>::make_op(
        mapped.shape(), {mapped},
        [mapped](std::span<const T> g, std::span<const T>) mutable {
            mapped.accumulate_grad(g);
        });
    auto mx = mapped.data();
    auto y = out.data();
    for (std::size_t i = 0; i < y.size(); ++i) {
        T v = mx[i];
        if (v <= lo) v = std::nextafter(lo, hi);
        if (v >= hi) v = std::nextafter(hi, lo);
        y[i] = v;
    }
    return out;
}

// Full module: predict K gains from texture, map into range, emit K
// contrast views per image. [B,1,H,W] -> [B,K,H,W], differentiable end to end.
template <typename T>
Tensor<T> acam_forward(Tensor<T> batch, PredictorWeights<T>& w,
                       const RangeSpec& range) {
    auto alphas = map_to_range(predict_raw(batch, w), range);
    return contrast_views(batch, alphas);
}

// Convenience: the mapped gains alone, for export and inspection.
template <typename T>
Tensor<T> predict_gains(Tensor<T> batch, PredictorWeights<T>& w,
                        const RangeSpec& range) {
    return map_to_range(predict_raw(batch, w), range);
}

} // namespace acam

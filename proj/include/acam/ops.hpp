#pragma once

#include <cmath>
#include <vector>

#include "acam/rng.hpp"
#include "acam/tensor.hpp"

namespace acam {

namespace detail {

// Uniform +-sqrt(1/fan_in) initialization from the portable RNG stream.
template <typename T>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, SplitMix64& rng) {
    double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::vector<T> d(shape_numel(shape));
    for (auto& v : d) v = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from_data(std::move(shape), std::move(d));
}

// Unpack x[Cin,H,W] into col[Cin*kh*kw, Hout*Wout] for a kh x kw window
// with given stride and zero padding.
template <typename T>
void im2col(const T* x, std::size_t cin, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, std::size_t stride,
            std::size_t pad, std::size_t hout, std::size_t wout, T* col) {
    for (std::size_t c = 0; c < cin; ++c) {
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                T* dst = col + ((c * kh + ki) * kw + kj) * (hout * wout);
                for (std::size_t oi = 0; oi < hout; ++oi) {
                    std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride + ki) -
                                        static_cast<std::ptrdiff_t>(pad);
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) {
                        for (std::size_t oj = 0; oj < wout; ++oj) dst[oi * wout + oj] = T(0);
                        continue;
                    }
                    const T* xrow = x + (c * h + static_cast<std::size_t>(ii)) * w;
                    for (std::size_t oj = 0; oj < wout; ++oj) {
                        std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * stride + kj) -
                                            static_cast<std::ptrdiff_t>(pad);
                        dst[oi * wout + oj] =
                            (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w))
                                ? T(0)
                                : xrow[static_cast<std::size_t>(jj)];
                    }
                }
            }
        }
    }
}

// Scatter-add of col gradients back onto the padded input grid.
template <typename T>
void col2im_acc(const T* col, std::size_t cin, std::size_t h, std::size_t w,
                std::size_t kh, std::size_t kw, std::size_t stride,
                std::size_t pad, std::size_t hout, std::size_t wout, T* x) {
    for (std::size_t c = 0; c < cin; ++c) {
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const T* src = col + ((c * kh + ki) * kw + kj) * (hout * wout);
                for (std::size_t oi = 0; oi < hout; ++oi) {
                    std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride + ki) -
                                        static_cast<std::ptrdiff_t>(pad);
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                    T* xrow = x + (c * h + static_cast<std::size_t>(ii)) * w;
                    for (std::size_t oj = 0; oj < wout; ++oj) {
                        std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * stride + kj) -
                                            static_cast<std::ptrdiff_t>(pad);
                        if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) continue;
                        xrow[static_cast<std::size_t>(jj)] += src[oi * wout + oj];
                    }
                }
            }
        }
    }
}

} // namespace detail

// 2D cross-correlation (no kernel flip), zero padding.
// input [B,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout] -> [B,Cout,H',W'].
template <typename T>
Tensor<T> conv2d(Tensor<T> input, Tensor<T> weight, Tensor<T> bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
    if (input.ndim() != 4)
        throw ShapeError("conv2d: input must be 4-D [B,Cin,H,W], got " +
                         shape_str(input.shape()));
    if (weight.ndim() != 4)
        throw ShapeError("conv2d: weight must be 4-D [Cout,Cin,kh,kw], got " +
                         shape_str(weight.shape()));
    const std::size_t b = input.dim(0), cin = input.dim(1);
    const std::size_t h = input.dim(2), w = input.dim(3);
    const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != cin)
        throw ShapeError("conv2d: channel mismatch, input axis 1 is " +
                         std::to_string(cin) + " but weight axis 1 is " +
                         std::to_string(weight.dim(1)));
    if (bias.ndim() != 1 || bias.dim(0) != cout)
        throw ShapeError("conv2d: bias must be [Cout]=" + std::to_string(cout) +
                         ", got " + shape_str(bias.shape()));
    if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
    if (h + 2 * padding < kh || w + 2 * padding < kw)
        throw ShapeError("conv2d: kernel " + shape_str({kh, kw}) +
                         " larger than padded input on spatial axes 2,3");
    const std::size_t hout = (h + 2 * padding - kh) / stride + 1;
    const std::size_t wout = (w + 2 * padding - kw) / stride + 1;
    const std::size_t ckk = cin * kh * kw, hw = hout * wout;

    auto out = Tensor<T>::make_op(
        {b, cout, hout, wout}, {input, weight, bias},
        [=](std::span<const T> g, std::span<const T>) mutable {
            std::vector<T> col(ckk * hw);
            std::vector<T> dcol(ckk * hw);
            auto xin = input.data();
            for (std::size_t bi = 0; bi < b; ++bi) {
                const T* gb = g.data() + bi * cout * hw;
                if (weight.needs_grad() || bias.needs_grad()) {
                    detail::im2col(xin.data() + bi * cin * h * w, cin, h, w, kh, kw,
                                   stride, padding, hout, wout, col.data());
                    if (weight.needs_grad())
                        detail::matmul_bt_acc(gb, col.data(), weight.grad_mut().data(),
                                              cout, hw, ckk);
                    if (bias.needs_grad()) {
                        auto dbias = bias.grad_mut();
                        for (std::size_t oc = 0; oc < cout; ++oc) {
                            T acc = T(0);
                            for (std::size_t i = 0; i < hw; ++i) acc += gb[oc * hw + i];
                            dbias[oc] += acc;
                        }
                    }
                }
                if (input.needs_grad()) {
                    std::fill(dcol.begin(), dcol.end(), T(0));
                    detail::matmul_at_acc(weight.data().data(), gb, dcol.data(),
                                          ckk, cout, hw);
                    detail::col2im_acc(dcol.data(), cin, h, w, kh, kw, stride, padding,
                                       hout, wout,
                                       input.grad_mut().data() + bi * cin * h * w);
                }
            }
        });

    std::vector<T> col(ckk * hw);
    auto xin = input.data();
    auto wgt = weight.data();
    auto bs = bias.data();
    auto y = out.data();
    for (std::size_t bi = 0; bi < b; ++bi) {
        detail::im2col(xin.data() + bi * cin * h * w, cin, h, w, kh, kw, stride,
                       padding, hout, wout, col.data());
        T* yb = y.data() + bi * cout * hw;
        for (std::size_t oc = 0; oc < cout; ++oc)
            for (std::size_t i = 0; i < hw; ++i) yb[oc * hw + i] = bs[oc];
        detail::matmul_acc(wgt.data(), col.data(), yb, cout, ckk, hw);
    }
    return out;
}

template <typename T>
Tensor<T> relu(Tensor<T> x) {
    auto out = Tensor<T>::make_op(
        x.shape(), {x},
        [x](std::span<const T> g, std::span<const T> y) mutable {
            auto dx = x.grad_mut();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (y[i] > T(0)) dx[i] += g[i];
        });
    auto xin = x.data();
    auto y = out.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xin[i] > T(0) ? xin[i] : T(0);
    return out;
}

// Numerically stable logistic; branches on sign so exp never overflows.
template <typename T>
Tensor<T> sigmoid(Tensor<T> x) {
    auto out = Tensor<T>::make_op(
        x.shape(), {x},
        [x](std::span<const T> g, std::span<const T> y) mutable {
            auto dx = x.grad_mut();
            for (std::size_t i = 0; i < g.size(); ++i)
                dx[i] += g[i] * y[i] * (T(1) - y[i]);
        });
    auto xin = x.data();
    auto y = out.data();
    for (std::size_t i = 0; i < y.size(); ++i) {
        T v = xin[i];
        if (v >= T(0)) {
            y[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            T e = std::exp(v);
            y[i] = e / (T(1) + e);
        }
    }
    return out;
}

// [B,C,H,W] -> [B,C]; the gradient spreads 1/(H*W) uniformly.
template <typename T>
Tensor<T> global_avg_pool(Tensor<T> x) {
    if (x.ndim() != 4)
        throw ShapeError("global_avg_pool: expected [B,C,H,W], got " +
                         shape_str(x.shape()));
    const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    auto out = Tensor<T>::make_op(
        {b, c}, {x},
        [x, hw](std::span<const T> g, std::span<const T>) mutable {
            auto dx = x.grad_mut();
            for (std::size_t i = 0; i < g.size(); ++i) {
                T gv = g[i] / static_cast<T>(hw);
                T* d = dx.data() + i * hw;
                for (std::size_t j = 0; j < hw; ++j) d[j] += gv;
            }
        });
    auto xin = x.data();
    auto y = out.data();
    for (std::size_t i = 0; i < b * c; ++i) {
        T acc = T(0);
        const T* p = xin.data() + i * hw;
        for (std::size_t j = 0; j < hw; ++j) acc += p[j];
        y[i] = acc / static_cast<T>(hw);
    }
    return out;
}

// input [B,n] x weight [m,n] + bias [m] -> [B,m].
template <typename T>
Tensor<T> linear(Tensor<T> input, Tensor<T> weight, Tensor<T> bias) {
    if (input.ndim() != 2 || weight.ndim() != 2)
        throw ShapeError("linear: expected input [B,n] and weight [m,n], got " +
                         shape_str(input.shape()) + " and " + shape_str(weight.shape()));
    const std::size_t b = input.dim(0), n = input.dim(1), m = weight.dim(0);
    if (weight.dim(1) != n)
        throw ShapeError("linear: inner dimension mismatch, input axis 1 is " +
                         std::to_string(n) + " but weight axis 1 is " +
                         std::to_string(weight.dim(1)));
    if (bias.ndim() != 1 || bias.dim(0) != m)
        throw ShapeError("linear: bias must be [m]=" + std::to_string(m) + ", got " +
                         shape_str(bias.shape()));
    auto out = Tensor<T>::make_op(
        {b, m}, {input, weight, bias},
        [=](std::span<const T> g, std::span<const T>) mutable {
            if (input.needs_grad())
                detail::matmul_acc(g.data(), weight.data().data(),
                                   input.grad_mut().data(), b, m, n);
            if (weight.needs_grad())
                detail::matmul_at_acc(g.data(), input.data().data(),
                                      weight.grad_mut().data(), m, b, n);
            if (bias.needs_grad()) {
                auto db = bias.grad_mut();
                for (std::size_t i = 0; i < b; ++i)
                    for (std::size_t j = 0; j < m; ++j) db[j] += g[i * m + j];
            }
        });
    auto y = out.data();
    auto bs = bias.data();
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < m; ++j) y[i * m + j] = bs[j];
    detail::matmul_bt_acc(input.data().data(), weight.data().data(), y.data(), b, n, m);
    return out;
}

// Mean over the batch of -log softmax(logits)[label], via log-sum-exp with
// max subtraction. Gradient is (softmax - onehot) / B.
template <typename T>
Tensor<T> softmax_cross_entropy(Tensor<T> logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2)
        throw ShapeError("softmax_cross_entropy: logits must be [B,C], got " +
                         shape_str(logits.shape()));
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    if (labels.size() != b)
        throw ShapeError("softmax_cross_entropy: batch is " + std::to_string(b) +
                         " but got " + std::to_string(labels.size()) + " labels");
    for (std::size_t i = 0; i < b; ++i)
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
            throw std::out_of_range("softmax_cross_entropy: label " +
                                    std::to_string(labels[i]) + " at row " +
                                    std::to_string(i) + " outside [0," +
                                    std::to_string(c) + ")");
    auto probs = std::make_shared<std::vector<T>>(b * c);
    auto lx = logits.data();
    T loss = T(0);
    for (std::size_t i = 0; i < b; ++i) {
        const T* row = lx.data() + i * c;
        T mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
        T lse = mx + std::log(denom);
        for (std::size_t j = 0; j < c; ++j)
            (*probs)[i * c + j] = std::exp(row[j] - mx) / denom;
        loss += lse - row[labels[i]];
    }
    loss /= static_cast<T>(b);

    auto out = Tensor<T>::make_op(
        {1}, {logits},
        [logits, labels, probs, b, c](std::span<const T> g,
                                      std::span<const T>) mutable {
            auto dx = logits.grad_mut();
            T scale = g[0] / static_cast<T>(b);
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t j = 0; j < c; ++j)
                    dx[i * c + j] += scale * (*probs)[i * c + j];
                dx[i * c + labels[i]] -= scale;
            }
        });
    out.data()[0] = loss;
    return out;
}

template <typename T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    auto out = Tensor<T>::make_op(
        a.shape(), {a, b},
        [a, b](std::span<const T> g, std::span<const T>) mutable {
            if (a.needs_grad()) a.accumulate_grad(g);
            if (b.needs_grad()) b.accumulate_grad(g);
        });
    auto ax = a.data(); auto bx = b.data(); auto y = out.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = ax[i] + bx[i];
    return out;
}

template <typename T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    auto out = Tensor<T>::make_op(
        a.shape(), {a, b},
        [a, b](std::span<const T> g, std::span<const T>) mutable {
            if (a.needs_grad()) {
                auto da = a.grad_mut(); auto bx = b.data();
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bx[i];
            }
            if (b.needs_grad()) {
                auto db = b.grad_mut(); auto ax = a.data();
                for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * ax[i];
            }
        });
    auto ax = a.data(); auto bx = b.data(); auto y = out.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = ax[i] * bx[i];
    return out;
}

template <typename T>
Tensor<T> scale(Tensor<T> a, T factor) {
    auto out = Tensor<T>::make_op(
        a.shape(), {a},
        [a, factor](std::span<const T> g, std::span<const T>) mutable {
            auto da = a.grad_mut();
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * factor;
        });
    auto ax = a.data(); auto y = out.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = ax[i] * factor;
    return out;
}

// Same data, new shape; gradients pass through unchanged.
template <typename T>
Tensor<T> reshape(Tensor<T> x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    auto out = Tensor<T>::make_op(
        std::move(shape), {x},
        [x](std::span<const T> g, std::span<const T>) mutable {
            x.accumulate_grad(g);
        });
    std::copy(x.data().begin(), x.data().end(), out.data().begin());
    return out;
}

// Elementwise a*x + b with scalar coefficients.
template <typename T>
Tensor<T> affine(Tensor<T> x, T a, T b) {
    auto out = Tensor<T>::make_op(
        x.shape(), {x},
        [x, a](std::span<const T> g, std::span<const T>) mutable {
            auto dx = x.grad_mut();
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * a;
        });
    auto xin = x.data(); auto y = out.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a * xin[i] + b;
    return out;
}

// Sum of all elements -> scalar.
template <typename T>
Tensor<T> sum(Tensor<T> a) {
    auto out = Tensor<T>::make_op(
        {1}, {a},
        [a](std::span<const T> g, std::span<const T>) mutable {
            auto da = a.grad_mut();
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[0];
        });
    T acc = T(0);
    for (T v : a.data()) acc += v;
    out.data()[0] = acc;
    return out;
}

} // namespace acam

#pragma once

#include <functional>

#include "acam/tensor.hpp"

namespace acam {

// Compares the analytic gradient of a scalar-valued map against central
// finite differences. Returns the max over coordinates of
// |analytic - fd| / max(1e-12, |fd|). Meant for 64-bit tensors.
template <typename T>
T finite_diff_check(const std::function<Tensor<T>(Tensor<T>)>& f,
                    const Tensor<T>& x0, T eps) {
    Tensor<T> x = x0.detach_copy();
    x.set_requires_grad();
    Tensor<T> loss = f(x);
    loss.backward();
    auto analytic = x.grad();

    Tensor<T> probe = x0.detach_copy();
    auto px = probe.data();
    T worst = T(0);
    for (std::size_t i = 0; i < px.size(); ++i) {
        T orig = px[i];
        px[i] = orig + eps;
        T up = f(probe).item();
        px[i] = orig - eps;
        T down = f(probe).item();
        px[i] = orig;
        T fd = (up - down) / (T(2) * eps);
        T denom = std::max(T(1e-12), std::abs(fd));
        worst = std::max(worst, std::abs(analytic[i] - fd) / denom);
    }
    return worst;
}

} // namespace acam

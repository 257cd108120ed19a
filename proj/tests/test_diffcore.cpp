#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "acam/gradcheck.hpp"
#include "acam/ops.hpp"
#include "acam/rng.hpp"
#include "acam/tensor.hpp"

using namespace acam;

namespace {

Tensor<double> random_tensor(Shape shape, SplitMix64& rng, double lo = -1.0,
                             double hi = 1.0) {
    std::vector<double> d(shape_numel(shape));
    for (auto& v : d) v = rng.uniform(lo, hi);
    return Tensor<double>::from_data(std::move(shape), std::move(d));
}

} // namespace

TEST_CASE("conv2d identity kernel is the identity map") {
    SplitMix64 rng(1);
    auto x = random_tensor({1, 1, 3, 3}, rng);
    auto w = Tensor<double>::from_data({1, 1, 1, 1}, {1.0});
    auto b = Tensor<double>::zeros({1});
    auto y = conv2d(x, w, b, 1, 0);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < 9; ++i) REQUIRE(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d direct evaluation on a 2x2 window") {
    auto x = Tensor<double>::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    auto w = Tensor<double>::full({1, 1, 2, 2}, 0.25);
    auto b = Tensor<double>::zeros({1});
    auto y = conv2d(x, w, b, 1, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    REQUIRE(y.item() == Catch::Approx(2.5).epsilon(1e-14));
}

TEST_CASE("conv2d with zero weight yields constant bias per channel") {
    SplitMix64 rng(2);
    auto x = random_tensor({2, 3, 5, 4}, rng);
    auto w = Tensor<double>::zeros({2, 3, 3, 3});
    auto b = Tensor<double>::from_data({2}, {0.7, -1.2});
    auto y = conv2d(x, w, b, 1, 1);
    for (std::size_t bi = 0; bi < 2; ++bi)
        for (std::size_t oc = 0; oc < 2; ++oc)
            for (std::size_t i = 0; i < 5 * 4; ++i)
                REQUIRE(y.data()[(bi * 2 + oc) * 20 + i] == b.data()[oc]);
}

TEST_CASE("conv2d names the offending axes on mismatch") {
    auto x = Tensor<double>::zeros({1, 2, 4, 4});
    auto w = Tensor<double>::zeros({1, 3, 3, 3});
    auto b = Tensor<double>::zeros({1});
    REQUIRE_THROWS_WITH(conv2d(x, w, b, 1, 1),
                        Catch::Matchers::ContainsSubstring("axis 1"));
}

TEST_CASE("relu forward and subgradient") {
    auto x = Tensor<double>::from_data({3}, {-1, 0, 2});
    auto y = relu(x);
    REQUIRE(y.data()[0] == 0.0);
    REQUIRE(y.data()[1] == 0.0);
    REQUIRE(y.data()[2] == 2.0);

    auto x2 = Tensor<double>::from_data({2}, {-1, 2}).set_requires_grad();
    sum(relu(x2)).backward();
    REQUIRE(x2.grad()[0] == 0.0);
    REQUIRE(x2.grad()[1] == 1.0);
}

TEST_CASE("relu of all-negative input is zero with zero gradient") {
    auto x = Tensor<double>::from_data({4}, {-3, -1, -0.5, -2}).set_requires_grad();
    auto y = relu(x);
    for (double v : y.data()) REQUIRE(v == 0.0);
    sum(y).backward();
    for (double g : x.grad()) REQUIRE(g == 0.0);
}

TEST_CASE("global_avg_pool means and uniform gradient spread") {
    auto c = Tensor<double>::full({1, 1, 4, 4}, 0.3);
    REQUIRE(global_avg_pool(c).item() == Catch::Approx(0.3).epsilon(1e-14));

    auto x = Tensor<double>::from_data({1, 1, 2, 2}, {1, 2, 3, 4}).set_requires_grad();
    auto y = global_avg_pool(x);
    REQUIRE(y.item() == Catch::Approx(2.5));
    sum(y).backward();
    for (double g : x.grad()) REQUIRE(g == 0.25);
}

TEST_CASE("global_avg_pool is linear in its input") {
    SplitMix64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        auto x = random_tensor({2, 3, 5, 7}, rng);
        double a = rng.uniform(-2.0, 2.0);
        auto lhs = global_avg_pool(scale(x, a));
        auto rhs = scale(global_avg_pool(x), a);
        for (std::size_t i = 0; i < lhs.size(); ++i)
            REQUIRE(lhs.data()[i] == Catch::Approx(rhs.data()[i]).margin(1e-12));
    }
}

TEST_CASE("linear identity, dot product, and zero input") {
    auto x = Tensor<double>::from_data({1, 2}, {1, 2});
    auto wid = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
    auto b0 = Tensor<double>::zeros({2});
    auto y = linear(x, wid, b0);
    REQUIRE(y.data()[0] == 1.0);
    REQUIRE(y.data()[1] == 2.0);

    auto w = Tensor<double>::from_data({1, 2}, {3, 4});
    auto b = Tensor<double>::from_data({1}, {5});
    REQUIRE(linear(x, w, b).item() == 16.0);

    auto z = Tensor<double>::zeros({3, 2});
    auto yz = linear(z, w, b);
    for (double v : yz.data()) REQUIRE(v == 5.0);
}

TEST_CASE("linear rejects mismatched inner dimensions") {
    auto x = Tensor<double>::zeros({1, 3});
    auto w = Tensor<double>::zeros({2, 4});
    auto b = Tensor<double>::zeros({2});
    REQUIRE_THROWS_AS(linear(x, w, b), ShapeError);
}

TEST_CASE("sigmoid closed-form values and saturation") {
    auto x = Tensor<double>::from_data({4}, {0.0, std::log(3.0), 50.0, -50.0});
    auto y = sigmoid(x);
    REQUIRE(y.data()[0] == 0.5);
    REQUIRE(y.data()[1] == Catch::Approx(0.75).epsilon(1e-14));
    REQUIRE(std::abs(y.data()[2] - 1.0) < 1e-15);
    REQUIRE(std::abs(y.data()[3]) < 1e-15);
    for (double v : y.data()) REQUIRE(std::isfinite(v));
}

TEST_CASE("softmax_cross_entropy reference values") {
    auto uniform = Tensor<double>::zeros({1, 6});
    REQUIRE(softmax_cross_entropy(uniform, {3}).item() ==
            Catch::Approx(std::log(6.0)).epsilon(1e-12));

    auto sep = Tensor<double>::from_data({1, 2}, {10, -10});
    double expected = -std::log(1.0 / (1.0 + std::exp(-20.0)));
    REQUIRE(softmax_cross_entropy(sep, {0}).item() ==
            Catch::Approx(expected).epsilon(1e-6));
    REQUIRE(softmax_cross_entropy(sep, {0}).item() < 1e-8);
}

TEST_CASE("softmax_cross_entropy rejects out-of-range labels") {
    auto logits = Tensor<double>::zeros({2, 3});
    REQUIRE_THROWS_AS(softmax_cross_entropy(logits, {0, 3}), std::out_of_range);
    REQUIRE_THROWS_AS(softmax_cross_entropy(logits, {-1, 0}), std::out_of_range);
}

TEST_CASE("softmax_cross_entropy is nonnegative and ln C at uniform logits") {
    SplitMix64 rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        std::size_t c = 2 + rng.next_below(6);
        std::size_t b = 1 + rng.next_below(4);
        auto logits = random_tensor({b, c}, rng, -5.0, 5.0);
        std::vector<int> labels(b);
        for (auto& l : labels) l = static_cast<int>(rng.next_below(c));
        REQUIRE(softmax_cross_entropy(logits, labels).item() >= 0.0);
    }
}

TEST_CASE("backward populates expected gradients") {
    SplitMix64 rng(5);
    auto x = random_tensor({2, 3}, rng);
    x.set_requires_grad();
    sum(x).backward();
    for (double g : x.grad()) REQUIRE(g == 1.0);

    auto x2 = Tensor<double>::from_data({2}, {1, 2}).set_requires_grad();
    sum(mul(x2, x2)).backward();
    REQUIRE(x2.grad()[0] == Catch::Approx(2.0));
    REQUIRE(x2.grad()[1] == Catch::Approx(4.0));
}

TEST_CASE("gradients accumulate until zeroed") {
    auto x = Tensor<double>::from_data({2}, {1, 2}).set_requires_grad();
    sum(mul(x, x)).backward();
    sum(mul(x, x)).backward();
    REQUIRE(x.grad()[0] == Catch::Approx(4.0));
    REQUIRE(x.grad()[1] == Catch::Approx(8.0));
    x.zero_grad();
    REQUIRE(x.grad()[0] == 0.0);
}

TEST_CASE("backward rejects non-scalar losses") {
    auto x = Tensor<double>::zeros({2, 2}).set_requires_grad();
    auto y = relu(x);
    REQUIRE_THROWS_AS(y.backward(), std::logic_error);
}

TEST_CASE("finite_diff_check on sum is tiny") {
    SplitMix64 rng(6);
    auto x = random_tensor({3, 4}, rng);
    double err = finite_diff_check<double>(
        [](Tensor<double> t) { return sum(t); }, x, 1e-5);
    REQUIRE(err < 1e-9);
}

TEST_CASE("every diffcore op passes the finite-difference oracle") {
    SplitMix64 rng(7);
    for (int seed = 0; seed < 20; ++seed) {
        std::size_t h = 3 + rng.next_below(4), w = 3 + rng.next_below(4);
        auto x = random_tensor({2, 2, h, w}, rng);
        auto cw = random_tensor({3, 2, 3, 3}, rng);
        auto cb = random_tensor({3}, rng);
        auto lw = random_tensor({4, 3}, rng);
        auto lb = random_tensor({4}, rng);
        std::vector<int> labels{1, 3};

        auto head = [&](Tensor<double> t) {
            auto logits = linear(global_avg_pool(relu(conv2d(t, cw, cb, 1, 1))), lw, lb);
            return softmax_cross_entropy(logits, labels);
        };
        REQUIRE(finite_diff_check<double>(head, x, 1e-5) < 1e-4);

        // weight and bias paths
        auto wrt_w = [&](Tensor<double> t) {
            auto logits = linear(global_avg_pool(relu(conv2d(x, t, cb, 2, 1))), lw, lb);
            return softmax_cross_entropy(logits, labels);
        };
        REQUIRE(finite_diff_check<double>(wrt_w, cw, 1e-5) < 1e-4);

        auto sig = [&](Tensor<double> t) { return sum(mul(sigmoid(t), t)); };
        REQUIRE(finite_diff_check<double>(sig, x, 1e-5) < 1e-4);

        auto feats = global_avg_pool(relu(conv2d(x, cw, cb, 1, 1))).detach_copy();
        auto lin = [&](Tensor<double> t) {
            return softmax_cross_entropy(linear(feats, t, lb), labels);
        };
        REQUIRE(finite_diff_check<double>(lin, lw, 1e-5) < 1e-4);
    }
}

TEST_CASE("softmax_cross_entropy gradient matches central differences") {
    SplitMix64 rng(8);
    auto logits = random_tensor({4, 6}, rng, -3.0, 3.0);
    std::vector<int> labels{0, 2, 5, 1};
    double err = finite_diff_check<double>(
        [&](Tensor<double> t) { return softmax_cross_entropy(t, labels); },
        logits, 1e-5);
    REQUIRE(err < 1e-5);
}

TEST_CASE("replay is deterministic: identical inputs give identical grads") {
    auto run = [](std::uint64_t seed) {
        SplitMix64 rng(seed);
        auto x = random_tensor({1, 1, 6, 6}, rng);
        x.set_requires_grad();
        auto w = random_tensor({2, 1, 3, 3}, rng);
        w.set_requires_grad();
        auto b = Tensor<double>::zeros({2}).set_requires_grad();
        auto loss = softmax_cross_entropy(global_avg_pool(relu(conv2d(x, w, b, 1, 1))), {1});
        loss.backward();
        std::vector<double> out{loss.item()};
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    auto a = run(99), b = run(99);
    REQUIRE(a == b);
}

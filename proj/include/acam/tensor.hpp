#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#if defined(__SSE__) || defined(_M_X64)
#include <xmmintrin.h>
#endif

namespace acam {

namespace detail {

// Subnormal float arithmetic runs via microcode on x86 and slows training
// by an order of magnitude once activations and gradients get small. Flush
// them to zero process-wide; values that tiny carry no useful signal here.
#if defined(__SSE__) || defined(_M_X64)
inline const bool ftz_enabled = [] {
    _mm_setcsr(_mm_getcsr() | 0x8040); // FTZ | DAZ
    return true;
}();
#endif

} // namespace detail

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

// C[M,N] += A[M,K] * B[K,N], all row-major. The i-k-j ordering keeps the
// inner loop a contiguous axpy that gcc vectorizes.
template <typename T>
void matmul_acc(const T* a, const T* b, T* c,
                std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A^T[M,K] * B[K,N] where A is stored [K,M].
template <typename T>
void matmul_at_acc(const T* a, const T* b, T* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            T av = arow[i];
            if (av == T(0)) continue;
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[M,K] * B^T[K,N] where B is stored [N,K].
template <typename T>
void matmul_bt_acc(const T* a, const T* b, T* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

} // namespace detail

// Dense row-major tensor with reverse-mode autodiff. Each tensor owns a node
// in the recorded graph; `backward` replays the recorded ops in reverse
// topological order exactly once each, accumulating into `grad`. Grads
// accumulate across backward calls until zero_grad() is called.
template <typename T>
class Tensor {
    struct Node {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;        // allocated lazily, same size as data
        bool requires_grad = false; // leaf flag set by the user
        bool needs_grad = false;    // requires_grad or depends on one
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward_fn; // scatter node.grad to parents

        void ensure_grad() {
            if (grad.empty()) grad.assign(data.size(), T(0));
        }
    };

public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->data.assign(shape_numel(t.node_->shape), T(0));
        return t;
    }

    static Tensor full(Shape shape, T value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.node_->data.begin(), t.node_->data.end(), value);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> data) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(data);
        return t;
    }

    static Tensor scalar(T value) { return from_data({1}, {value}); }

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t ndim() const { return node_->shape.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    T item() const {
        if (size() != 1)
            throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        node_->requires_grad = on;
        node_->needs_grad = on;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    std::span<T> grad_mut() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty())
            std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    // Detached copy of the values (fresh leaf, no history).
    Tensor detach_copy() const {
        return from_data(shape(), {node_->data.begin(), node_->data.end()});
    }

    // Convert precision, detaching from the graph.
    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(node_->data.size());
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = static_cast<U>(node_->data[i]);
        return Tensor<U>::from_data(shape(), std::move(out));
    }

    // --- graph construction (used by the op layer) ---

    // `backward(out_grad, out_data)` scatters the upstream gradient into the
    // parents it captured; it runs only when some parent needs a gradient.
    using BackwardFn =
        std::function<void(std::span<const T> out_grad, std::span<const T> out_data)>;

    static Tensor make_op(Shape shape, const std::vector<Tensor>& parents,
                          BackwardFn backward) {
        Tensor t = zeros(std::move(shape));
        bool needs = false;
        for (auto& p : parents) {
            needs = needs || p.node_->needs_grad;
            t.node_->parents.push_back(p.node_);
        }
        t.node_->needs_grad = needs;
        if (needs && backward) {
            t.node_->backward_fn = [backward = std::move(backward)](Node& n) {
                backward(n.grad, n.data);
            };
        }
        return t;
    }

    bool needs_grad() const { return node_->needs_grad; }

    // Accumulate `delta` into this node's grad buffer (used by backward fns).
    void accumulate_grad(std::span<const T> delta) {
        if (!node_->needs_grad) return;
        node_->ensure_grad();
        for (std::size_t i = 0; i < delta.size(); ++i) node_->grad[i] += delta[i];
    }

    // Reverse-mode sweep from a scalar loss. Seeds d(loss)/d(loss)=1 and
    // visits every recorded op exactly once in reverse topological order.
    void backward() {
        if (size() != 1)
            throw std::logic_error("backward() requires a scalar loss, got shape " +
                                   shape_str(shape()));
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        topo(node_.get(), seen, order);
        node_->ensure_grad();
        node_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
        }
    }

private:
    static void topo(Node* n, std::unordered_set<Node*>& seen,
                     std::vector<Node*>& order) {
        // Iterative DFS; graphs from long training loops exceed stack depth.
        struct Frame { Node* node; std::size_t next; };
        std::vector<Frame> stack{{n, 0}};
        seen.insert(n);
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next < f.node->parents.size()) {
                Node* p = f.node->parents[f.next++].get();
                if (p->needs_grad && seen.insert(p).second)
                    stack.push_back({p, 0});
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Node> node_;

    template <typename U> friend class Tensor;
};

} // namespace acam

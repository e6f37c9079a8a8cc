#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "scaleformer/base.hpp"

// Forward-op finite checks. On by default in debug builds, compiled out of
// release/bench builds; test targets force them on.
#ifndef SCALEFORMER_CHECK_NUMERICS
#ifdef NDEBUG
#define SCALEFORMER_CHECK_NUMERICS 0
#else
#define SCALEFORMER_CHECK_NUMERICS 1
#endif
#endif

namespace scaleformer {

namespace detail {

// Reverse-mode graph node. `backprop` reads this node's grad and accumulates
// into the parents' grads; leaves have no backprop.
template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

template <typename T>
inline void check_finite(const std::vector<T>& v, const char* op) {
#if SCALEFORMER_CHECK_NUMERICS
    for (const T x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
#else
    (void)v;
    (void)op;
#endif
}

}  // namespace detail

// Disables graph recording for the scope (eval / timing paths).
class NoGradGuard {
  public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// Dense n-d array of T with an optional gradient slot. Value-semantic handle
// over a shared graph node; ops in ops.hpp record parents for reverse mode.
template <typename T>
class Tensor {
  public:
    using Node = detail::TensorNode<T>;

    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        require_shape(numel_of(shape) == static_cast<int64_t>(data.size()),
                      "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->value = std::move(data);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor full(const Shape& shape, T fill, bool requires_grad = false) {
        return from_data(shape, std::vector<T>(static_cast<size_t>(numel_of(shape)), fill), requires_grad);
    }

    static Tensor zeros(const Shape& shape, bool requires_grad = false) { return full(shape, T(0), requires_grad); }
    static Tensor ones(const Shape& shape, bool requires_grad = false) { return full(shape, T(1), requires_grad); }

    static Tensor scalar(T v) { return from_data({1}, {v}); }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return node_->numel(); }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const { return node_->grad; }
    std::vector<T>& mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        require(!node_->backprop, "requires_grad can only be toggled on leaf tensors");
        node_->requires_grad = on;
        return *this;
    }

    // numel()==1 accessor.
    T item() const {
        require(numel() == 1, "item() requires a scalar tensor, got shape " + shape_str(shape()));
        return node_->value[0];
    }

    const char* op() const { return node_->op; }
    bool is_leaf() const { return !node_->backprop; }

    // Constant copy cut off from the graph.
    Tensor detach() const { return from_data(shape(), data(), false); }

    std::shared_ptr<Node> node() const { return node_; }

  private:
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    template <typename U>
    friend Tensor<U> make_op(Shape shape, std::vector<U> value, const char* op,
                             std::vector<Tensor<U>> parents, std::function<void(detail::TensorNode<U>&)> backprop);

    std::shared_ptr<Node> node_;
};

// Records an op result. Parent links and the backprop closure are kept only
// when some parent requires grad and grad mode is on.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value, const char* op, std::vector<Tensor<T>> parents,
                  std::function<void(detail::TensorNode<T>&)> backprop) {
    detail::check_finite(value, op);
    auto node = std::make_shared<detail::TensorNode<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool needs_grad = false;
    if (detail::grad_mode()) {
        for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
    }
    if (needs_grad) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backprop = std::move(backprop);
    }
    return Tensor<T>(std::move(node));
}

// Ordered record of the operations reachable from a root, leaves first. Every
// node appears exactly once and after all of its inputs.
template <typename T>
struct ComputationTape {
    std::vector<detail::TensorNode<T>*> nodes;

    static ComputationTape trace(const Tensor<T>& root) {
        ComputationTape tape;
        std::unordered_set<const detail::TensorNode<T>*> seen;
        // Iterative post-order DFS; graphs can be deep.
        struct Frame {
            detail::TensorNode<T>* node;
            size_t next_parent;
        };
        std::vector<Frame> stack;
        auto push = [&](detail::TensorNode<T>* n) {
            if (n->requires_grad && seen.insert(n).second) stack.push_back({n, 0});
        };
        push(root.node().get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                push(f.node->parents[f.next_parent++].get());
            } else {
                tape.nodes.push_back(f.node);
                stack.pop_back();
            }
        }
        return tape;
    }
};

// Populates grad for every requires_grad tensor reachable from `loss`.
// Gradients accumulate additively across fan-out.
template <typename T>
void backward(const Tensor<T>& loss) {
    require(loss.numel() == 1, "backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    auto tape = ComputationTape<T>::trace(loss);
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
        detail::TensorNode<T>* n = *it;
        if (n->backprop) {
            n->ensure_grad();
            n->backprop(*n);
        }
    }
}

// Accumulation helper used by op backprops.
template <typename T>
inline std::vector<T>& grad_of(const std::shared_ptr<detail::TensorNode<T>>& node) {
    node->ensure_grad();
    return node->grad;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace scaleformer

#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "ddl/common.hpp"
#include "ddl/rng.hpp"

namespace ddl {

// Reverse-mode autodiff over dense row-major tensors. The graph is taped
// dynamically: every recorded op captures its parents and a closure that
// routes the output gradient back to them. Gradients accumulate until
// zero_grad() is called.
class Tensor {
public:
    struct Node {
        std::vector<i64> shape;
        std::vector<real> data;
        std::vector<real> grad; // sized lazily on first accumulation
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward_fn;

        i64 numel() const {
            i64 n = 1;
            for (i64 d : shape) n *= d;
            return n;
        }
        void ensure_grad() {
            if (grad.empty()) grad.assign(data.size(), real{0});
        }
    };

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor from_data(std::vector<i64> shape, std::vector<real> data, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        i64 expect = 1;
        for (i64 d : shape) {
            check_dims(d >= 0, "tensor: negative dimension");
            expect *= d;
        }
        check_dims(expect == static_cast<i64>(data.size()), "tensor: shape does not match data length");
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor zeros(std::vector<i64> shape, bool requires_grad = false) {
        i64 count = 1;
        for (i64 d : shape) count *= d;
        return from_data(std::move(shape), std::vector<real>(static_cast<std::size_t>(count), real{0}), requires_grad);
    }

    static Tensor full(std::vector<i64> shape, real v, bool requires_grad = false) {
        i64 count = 1;
        for (i64 d : shape) count *= d;
        return from_data(std::move(shape), std::vector<real>(static_cast<std::size_t>(count), v), requires_grad);
    }

    static Tensor scalar(real v) { return from_data({}, {v}); }

    static Tensor randn(std::vector<i64> shape, Rng& rng, real stddev = real{1}, bool requires_grad = false) {
        i64 count = 1;
        for (i64 d : shape) count *= d;
        std::vector<real> data(static_cast<std::size_t>(count));
        for (auto& v : data) v = stddev * rng.normal();
        return from_data(std::move(shape), std::move(data), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<i64>& shape() const { return node_->shape; }
    i64 dim(std::size_t i) const { return node_->shape.at(i); }
    i64 numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::vector<real>& data() { return node_->data; }
    const std::vector<real>& data() const { return node_->data; }
    real item() const {
        check_dims(numel() == 1, "item: tensor is not a scalar");
        return node_->data[0];
    }

    const std::vector<real>& grad() const {
        const_cast<Node*>(node_.get())->ensure_grad();
        return node_->grad;
    }

    void zero_grad() {
        node_->grad.assign(node_->data.size(), real{0});
    }

    std::shared_ptr<Node> node() const { return node_; }

    // Detached copy: same values, no history, fresh storage.
    Tensor detach_copy(bool requires_grad = false) const {
        return from_data(node_->shape, node_->data, requires_grad);
    }

private:
    std::shared_ptr<Node> node_;
};

// When set, ops run without recording the tape. Used for inference,
// sampling loops, and finite-difference probes.
class NoGradGuard {
public:
    NoGradGuard() : prev_(enabled()) { enabled() = false; }
    ~NoGradGuard() { enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool grad_enabled() { return enabled(); }

private:
    static bool& enabled() {
        thread_local bool on = true;
        return on;
    }
    bool prev_;
};

namespace detail {

inline bool tape_active(std::initializer_list<const Tensor*> inputs) {
    if (!NoGradGuard::grad_enabled()) return false;
    for (const Tensor* t : inputs)
        if ((*t).requires_grad()) return true;
    return false;
}

} // namespace detail

// Backpropagate from a scalar loss. Fills grads of every requires_grad
// tensor reachable through the tape; repeated calls accumulate.
inline void backward(const Tensor& loss) {
    check_dims(loss.numel() == 1, "backward: loss must be a scalar");
    auto root = loss.node();
    if (!root->requires_grad) return;

    // Topological order (parents before children in `order` reversed).
    std::vector<Tensor::Node*> order;
    std::unordered_set<Tensor::Node*> seen;
    std::vector<std::pair<Tensor::Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Tensor::Node* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior grads are scratch space for this pass; only leaves (no
    // backward_fn) keep accumulating across calls.
    for (Tensor::Node* n : order) {
        if (n->backward_fn)
            n->grad.assign(n->data.size(), real{0});
        else
            n->ensure_grad();
    }

    root->grad[0] += real{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor::Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

} // namespace ddl

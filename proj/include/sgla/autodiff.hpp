#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sgla/tensor.hpp"

namespace sgla {

// Reverse-mode tape. Each op allocates a fresh node holding its output value,
// handles to its inputs, and a closure that pulls the upstream gradient from
// the node and accumulates into the inputs. backward() walks the graph once
// in reverse topological order; running a node's closure twice is an error.
template <typename T>
class Var {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // allocated lazily
        std::vector<Var<T>> parents;
        std::function<void(Node&)> backward_fn;
        const char* op = "leaf";
        bool requires_grad = false;
        bool backward_ran = false;
    };

    Var() = default;

    static Var leaf(Tensor<T> value, bool requires_grad = false) {
        Var v;
        v.node_ = std::make_shared<Node>();
        v.node_->value = std::move(value);
        v.node_->requires_grad = requires_grad;
        if (requires_grad) v.node_->grad = Tensor<T>::zeros(v.node_->value.shape());
        return v;
    }

    static Var make(const char* op, Tensor<T> value, std::vector<Var> parents,
                    std::function<void(Node&)> backward_fn) {
        Var v;
        v.node_ = std::make_shared<Node>();
        v.node_->value = std::move(value);
        v.node_->op = op;
        bool requires = false;
        for (const auto& p : parents) requires = requires || p.requires_grad();
        v.node_->requires_grad = requires;
        if (requires) {
            v.node_->parents = std::move(parents);
            v.node_->backward_fn = std::move(backward_fn);
        }
        return v;
    }

    bool valid() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    // In-place mutation hook for the optimizer and finite differencing.
    Tensor<T>& mutable_value() { return node_->value; }

    const std::vector<std::size_t>& shape() const { return node_->value.shape(); }
    std::size_t numel() const { return node_->value.numel(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const char* op() const { return node_->op; }

    bool has_grad() const { return node_ && !node_->grad.empty(); }

    const Tensor<T>& grad() const {
        if (!has_grad()) throw AutodiffError("grad: no gradient has been accumulated");
        return node_->grad;
    }

    Tensor<T>& ensure_grad() {
        if (node_->grad.empty()) node_->grad = Tensor<T>::zeros(node_->value.shape());
        return node_->grad;
    }

    void zero_grad() {
        if (node_ && !node_->grad.empty()) node_->grad.fill(T{0});
    }

    // Accumulates g into this var's gradient. No-op when gradients are not
    // tracked, so op closures can call it unconditionally.
    void accumulate_grad(const Tensor<T>& g) {
        if (!requires_grad()) return;
        if (g.shape() != node_->value.shape()) {
            throw AutodiffError("gradient shape " + Tensor<T>::shape_string(g.shape()) +
                                " does not match value shape " +
                                Tensor<T>::shape_string(node_->value.shape()));
        }
        Tensor<T>& acc = ensure_grad();
        const T* src = g.data();
        T* dst = acc.data();
        const std::size_t n = g.numel();
        for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
    }

    Node* node() const { return node_.get(); }

    // Value copy detached from the tape.
    Var detach() const { return leaf(node_->value, false); }

private:
    std::shared_ptr<Node> node_;
};

// Runs reverse-mode accumulation from a scalar root. Every reachable node's
// closure fires exactly once; leaf gradients are left in place so they can be
// consumed by an optimizer step or inspected by the checker.
template <typename T>
void backward(const Var<T>& root) {
    if (!root.valid()) throw AutodiffError("backward: empty variable");
    if (root.numel() != 1) throw AutodiffError("backward: root must be a scalar");
    if (!root.requires_grad()) {
        throw AutodiffError("backward: value does not depend on any differentiable input");
    }

    using Node = typename Var<T>::Node;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS over parents.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next].node();
            ++next;
            if (parent->requires_grad && seen.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad = Tensor<T>::full(root.shape(), T{1});
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (!node->backward_fn) continue;
        if (node->backward_ran) {
            throw AutodiffError(std::string("backward already ran for op '") + node->op + "'");
        }
        if (node->grad.empty()) node->grad = Tensor<T>::zeros(node->value.shape());
        node->backward_ran = true;
        node->backward_fn(*node);
    }
}

}  // namespace sgla

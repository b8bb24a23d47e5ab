#ifndef LMDET_GRAPH_HPP
#define LMDET_GRAPH_HPP

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "lmdet/tensor.hpp"

namespace lmdet {

// Reverse-mode tape node. Graphs are rebuilt per forward pass; parameters
// are long-lived leaves owned by their module.
template <class S>
struct NodeT {
    TensorT<S> value;
    TensorT<S> grad;  // allocated on demand, same shape as value
    bool requires_grad = false;
    std::string name;  // non-empty for parameters
    std::vector<std::shared_ptr<NodeT>> parents;
    // Accumulates into parents' grads; reads this->grad. Raw `this` capture is
    // safe: the closure lives on the node itself.
    std::function<void()> backprop;

    void ensure_grad() {
        if (grad.shape != value.shape) {
            grad = TensorT<S>(value.shape);
        }
    }
    void zero_grad() {
        if (grad.shape == value.shape)
            grad.fill(S(0));
        else
            ensure_grad();
    }
};

template <class S>
using Value = std::shared_ptr<NodeT<S>>;

template <class S>
Value<S> make_leaf(TensorT<S> v, bool requires_grad = false, std::string name = "") {
    auto n = std::make_shared<NodeT<S>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    n->name = std::move(name);
    if (requires_grad) n->ensure_grad();
    return n;
}

template <class S>
Value<S> make_op(std::vector<Value<S>> parents, TensorT<S> value) {
    auto n = std::make_shared<NodeT<S>>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    return n;
}

// Backprop from a scalar root. Seeds d(root)/d(root) = 1 and runs the tape
// in reverse topological order. Parameter grads accumulate (callers zero
// them between steps).
template <class S>
void backward(const Value<S>& root) {
    if (root->value.numel() != 1) throw InvalidInput("backward: root must be a scalar");
    // iterative post-order DFS
    std::vector<NodeT<S>*> order;
    std::unordered_set<NodeT<S>*> seen;
    std::vector<std::pair<NodeT<S>*, size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            NodeT<S>* p = node->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (NodeT<S>* n : order) n->ensure_grad();
    root->grad.data[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backprop) (*it)->backprop();
    }
}

}  // namespace lmdet

#endif

#include "cim/graph.hpp"

#include <stdexcept>
#include <unordered_set>

namespace cim {

NodeP make_leaf(Param& p) {
    auto n = std::make_shared<Node>();
    n->value = p.value;
    n->requires_grad = p.trainable;
    n->param = &p;
    return n;
}

NodeP make_const(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return n;
}

void backward(const NodeP& loss) {
    if (loss->value.numel() != 1)
        throw std::runtime_error("backward: loss must be a scalar");

    // iterative post-order DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({loss.get(), 0});
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // Reset node grads so a repeated backward() without re-forward doubles
    // Param grads consistently instead of compounding stale node grads.
    for (Node* n : order) n->grad = Tensor();

    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    for (Node* n : order) {
        if (n->param && n->param->trainable && !n->grad.empty())
            n->param->accumulate_grad(n->grad);
    }
}

}  // namespace cim

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "cim/tensor.hpp"

namespace cim {

// Reverse-mode autodiff node. The forward pass builds a DAG of these;
// backward() runs one reverse sweep and flushes leaf grads into Params.
// Calling backward twice on the same graph accumulates (doubles) grads.
struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily during backward
    bool requires_grad = false;
    Param* param = nullptr;  // set on leaves bound to a Param
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // reads grad, accumulates into parents

    void ensure_grad() {
        if (grad.empty()) grad = Tensor(value.shape);
    }
    void add_grad(const Tensor& g) {
        ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) grad[i] += g[i];
    }
};

using NodeP = std::shared_ptr<Node>;

NodeP make_leaf(Param& p);
NodeP make_const(Tensor t);

// loss must be scalar. Accumulates into every reachable Param's grad.
void backward(const NodeP& loss);

}  // namespace cim

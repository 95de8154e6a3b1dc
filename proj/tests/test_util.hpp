#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "cim/graph.hpp"
#include "cim/ops.hpp"
#include "cim/tensor.hpp"

namespace cim::test {

// Collapses any tensor to a smooth scalar loss (mean CE against class 0),
// so finite-difference checks can probe every upstream element.
inline NodeP reduce_scalar(NodeP x) {
    NodeP f = flatten(x);
    return cross_entropy(f, std::vector<int>(static_cast<size_t>(f->value.dim(0)), 0));
}

inline Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, 1.0);
    Tensor t(std::move(shape));
    for (auto& v : t.v) v = g(rng) * scale;
    return t;
}

// Central finite-difference check of d(loss)/d(inputs[i]) for every element.
// build must construct a fresh scalar-loss graph from leaf nodes of the
// current param values each time it is called.
struct GradCheck {
    double rel_tol = 1e-4;
    double abs_floor = 1e-7;
    double h = 1e-6;
};

inline bool check_gradients(std::vector<Param>& params,
                            const std::function<NodeP(std::vector<NodeP>&)>& build,
                            const GradCheck& opt = {}) {
    std::vector<NodeP> leaves;
    auto forward = [&]() -> double {
        leaves.clear();
        for (auto& p : params) leaves.push_back(make_leaf(p));
        NodeP loss = build(leaves);
        return loss->value[0];
    };
    for (auto& p : params) p.zero_grad();
    leaves.clear();
    for (auto& p : params) leaves.push_back(make_leaf(p));
    backward(build(leaves));

    for (auto& p : params) {
        if (!p.trainable) continue;
        for (int64_t i = 0; i < p.value.numel(); ++i) {
            const double keep = p.value[i];
            p.value[i] = keep + opt.h;
            const double up = forward();
            p.value[i] = keep - opt.h;
            const double dn = forward();
            p.value[i] = keep;
            const double num = (up - dn) / (2 * opt.h);
            const double ana = p.grad.empty() ? 0.0 : p.grad[i];
            const double err = std::abs(num - ana);
            if (err > opt.abs_floor && err > opt.rel_tol * std::max(std::abs(num), std::abs(ana)))
                return false;
        }
    }
    return true;
}

}  // namespace cim::test

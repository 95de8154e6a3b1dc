#pragma once

#include <vector>

#include "cim/tensor.hpp"

namespace cim {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Standard Adam with bias correction. Throws if a trainable param has no grad.
void adam_step(const std::vector<Param*>& params, const AdamConfig& cfg);

void zero_grads(const std::vector<Param*>& params);

}  // namespace cim

#include "cim/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace cim {

void adam_step(const std::vector<Param*>& params, const AdamConfig& cfg) {
    for (Param* p : params) {
        if (!p->trainable) continue;
        if (p->grad.empty())
            throw std::runtime_error("adam_step: trainable param has no gradient");
        if (p->adam_m.empty()) {
            p->adam_m = Tensor(p->value.shape);
            p->adam_v = Tensor(p->value.shape);
        }
        p->adam_t += 1;
        const double bc1 = 1.0 - std::pow(cfg.beta1, double(p->adam_t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, double(p->adam_t));
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            const double g = p->grad[i];
            p->adam_m[i] = cfg.beta1 * p->adam_m[i] + (1.0 - cfg.beta1) * g;
            p->adam_v[i] = cfg.beta2 * p->adam_v[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = p->adam_m[i] / bc1;
            const double vhat = p->adam_v[i] / bc2;
            p->value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

void zero_grads(const std::vector<Param*>& params) {
    for (Param* p : params) p->zero_grad();
}

}  // namespace cim

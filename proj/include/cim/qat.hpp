#pragma once

#include <random>

#include "cim/data.hpp"
#include "cim/ir.hpp"
#include "cim/macro.hpp"

namespace cim {

struct QatConfig {
    int phase1_epochs = 6;
    int phase2_epochs = 6;
    int batch = 32;
    double phase1_lr = 0.001;
    double phase2_lr = 0.01;
    double calib_percentile = 99.9;
    int calib_images = 64;
};

// BN-folded conv weights/bias, computed with the same expressions as the
// in-graph fold (exact agreement matters for code export).
Tensor folded_conv_weights(const ModelGraph& m, int conv_id);
Tensor folded_conv_bias(const ModelGraph& m, int conv_id);

// Sets each conv's S_W to 2*mean(|W'|)/sqrt(q_p) over the BN-folded weights.
// Already-enabled quantizers are left untouched.
void init_weight_steps(ModelGraph& m, const MacroConfig& macro);

// Phase 1: weight fake-quant with learned S_W, BN folded in the graph.
// Returns final-epoch mean loss. With zero epochs only S_W gets initialized.
double phase1_train(ModelGraph& m, const Dataset& data, const QatConfig& cfg,
                    const MacroConfig& macro, std::mt19937_64& rng);

// Per-conv S_ADC from the |pre-ADC| magnitude percentile over a calibration
// batch, floored at 1e-8.
void calibrate_adc_step(ModelGraph& m, const Dataset& calib, const QatConfig& cfg,
                        const MacroConfig& macro);

// Phase 2: segmented partial-sum quantization; only conv/BN/linear weights
// train (S_W, S_A, S_ADC frozen).
double phase2_train(ModelGraph& m, const Dataset& data, const QatConfig& cfg,
                    const MacroConfig& macro, std::mt19937_64& rng);

}  // namespace cim

#pragma once

#include <functional>
#include <nlohmann/json_fwd.hpp>
#include <random>
#include <vector>

#include "cim/data.hpp"
#include "cim/ir.hpp"
#include "cim/macro.hpp"

namespace cim {

struct MorphConfig {
    double lambda_max = 1e-7;
    int ramp_epochs = 10;      // lambda rises linearly from 0 over this window
    double tau = 1e-2;         // |gamma| prune threshold
    int64_t target_bl = 0;
    double ratio_step = 0.001;
    double ratio_cap = 64.0;
    int iterations = 3;
    int shrink_epochs = 8;
    int finetune_epochs = 4;
    double shrink_lr = 0.05;
    double finetune_lr = 0.01;
    bool finetune_each_iteration = true;
    int batch = 32;

    void validate() const;
};

// Width-regularizer over BN gammas; A/B channel counts are recomputed from
// the current gammas and treated as constants in the gradient.
double regularizer_F(const ModelGraph& m, double tau);
// Accumulates lambda * dF/dgamma into the BN gamma grads.
void add_regularizer_grads(ModelGraph& m, double tau, double lambda);

double shrink_train(ModelGraph& m, const MorphConfig& cfg, const Dataset& data,
                    std::mt19937_64& rng);

// Drops output channels with |gamma| <= tau; residual-connected BN groups
// share a union keep-mask; every group keeps at least one channel.
ModelGraph prune_zero_gamma(const ModelGraph& m, double tau);

// Conv-chain view for the expansion-ratio constraint.
struct ConvShapeInfo {
    bool from_input = false;  // fed by the model input (channels never scaled)
    int c_in = 0;
    int c_out = 0;
    int k = 3;
};
std::vector<ConvShapeInfo> conv_chain(const ModelGraph& m);

// Closed-form bitline count of the scaled model (round half away from zero).
int64_t expansion_lhs(const std::vector<ConvShapeInfo>& convs, const MacroConfig& macro, double R);

struct RatioResult {
    double ratio = 1.0;
    bool capped = false;
    bool no_headroom = false;
};
RatioResult find_expansion_ratio(const std::vector<ConvShapeInfo>& convs, const MacroConfig& macro,
                                 int64_t target_bl, double step, double cap = 64.0);
// Plain-chain convenience: channels[i] are conv output widths, kernels[i] the
// kernel sizes, img_channels feeds the first conv.
RatioResult find_expansion_ratio(const std::vector<int>& channels, const std::vector<int>& kernels,
                                 int img_channels, const MacroConfig& macro, int64_t target_bl,
                                 double step, double cap = 64.0);

// Scales every channel group by R; retained weights are kept, new channels
// get fan-in-scaled Gaussian init.
ModelGraph expand_model(const ModelGraph& m, double R, std::mt19937_64& rng);

struct MorphIterationLog {
    int iteration = 0;
    int64_t params = 0;
    int64_t used_bls = 0;
    double ratio = 1.0;
    double macro_usage = 0.0;
    double accuracy = 0.0;
};
struct MorphReport {
    std::vector<MorphIterationLog> iterations;
    nlohmann::json to_json() const;
};

// on_iteration runs after each iteration's fine-tune (checkpointing hook).
ModelGraph morph_iterate(const ModelGraph& m, const MorphConfig& cfg, const Dataset& train_data,
                         const Dataset& test_data, const MacroConfig& macro, std::mt19937_64& rng,
                         MorphReport* report = nullptr,
                         const std::function<void(int, const ModelGraph&)>& on_iteration = {});

}  // namespace cim

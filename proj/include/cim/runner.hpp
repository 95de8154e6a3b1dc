#pragma once

#include <functional>
#include <map>
#include <random>

#include "cim/data.hpp"
#include "cim/graph.hpp"
#include "cim/ir.hpp"
#include "cim/macro.hpp"
#include "cim/optim.hpp"

namespace cim {

// Which forward graph to build for the IR.
//   Float*: real-valued convs, BN layers live (train: batch stats, eval: running).
//   Phase1: BN folded in-graph, weights fake-quantized with learned S_W.
//   Phase2: segmented integer conv with ADC partial-sum quantization, S_W fixed.
enum class ForwardMode { FloatTrain, FloatEval, Phase1Train, Phase1Eval, Phase2Train, Phase2Eval };

enum class Stage { Seed, Shrink, Finetune, Phase1, Phase2 };

struct ForwardOptions {
    ForwardMode mode = ForwardMode::FloatTrain;
    const MacroConfig* macro = nullptr;                     // required for Phase2
    std::map<int, std::vector<double>>* code_sink = nullptr;  // conv id -> ADC codes
    std::vector<Tensor>* layer_values = nullptr;              // per-layer outputs, by id
};

struct ForwardResult {
    NodeP logits;
    NodeP loss;  // null when labels not given
};

ForwardResult forward_model(ModelGraph& m, const Tensor& x, const std::vector<int>* labels,
                            const ForwardOptions& opts);

// Finds the activation-quantizer step feeding a conv (through pooling).
double input_act_step(const ModelGraph& m, int conv_id);

// Sets Param::trainable flags for a pipeline stage.
void set_stage_trainability(ModelGraph& m, Stage stage);

struct TrainConfig {
    int epochs = 1;
    int batch = 32;
    double lr = 0.01;
    bool augment = false;
    AdamConfig adam;
    const MacroConfig* macro = nullptr;
};

// Returns the mean loss of the final epoch. Hooks: pre_epoch runs before each
// epoch (regularizer bookkeeping), post_backward runs after backward and
// before the optimizer step (extra gradient terms).
double train(ModelGraph& m, const Dataset& data, const TrainConfig& cfg, ForwardMode mode,
             std::mt19937_64& rng, const std::function<void(int)>& pre_epoch = {},
             const std::function<void()>& post_backward = {});

// Top-1 accuracy in percent.
double evaluate(ModelGraph& m, const Dataset& data, ForwardMode mode,
                const MacroConfig* macro = nullptr, int batch = 64);

}  // namespace cim

#pragma once

#include <cstdint>
#include <map>
#include <nlohmann/json_fwd.hpp>
#include <vector>

#include "cim/integer_model.hpp"
#include "cim/tensor.hpp"

namespace cim {

struct SimLayerTrace {
    int layer_id = -1;
    int64_t conversions = 0;
    int64_t cycles = 0;
    int64_t clip_events = 0;
    double max_pre_adc = 0.0;
};

struct SimTrace {
    std::vector<SimLayerTrace> layers;
    int64_t conversions = 0;
    int64_t cycles = 0;
    int64_t clip_events = 0;
    double max_pre_adc = 0.0;
    nlohmann::json to_json() const;
};

// Qa = round(clip(x/S_A, 0, 2^dac_bits - 1)).
Tensor dac_quantize_input(const Tensor& x, double s_a, int dac_bits);

// Runs the exported model on a [N,C,H,W] batch. ADC codes go to code_sink
// (conv id -> codes in image/segment/filter/position order) when non-null.
struct SimResult {
    Tensor logits;  // [N, classes]
    SimTrace trace;
};
SimResult simulate_inference(const IntegerModel& im, const Tensor& x,
                             std::map<int, std::vector<double>>* code_sink = nullptr);

}  // namespace cim

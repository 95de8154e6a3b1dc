#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cim/ir.hpp"
#include "cim/macro.hpp"

namespace cim {

// One exported layer. Mirrors the training IR one-to-one (same ids) so the
// simulator can replay the exact forward order; BatchNorm entries are
// pass-through aliases of their already-folded conv.
struct IntLayer {
    LayerKind kind = LayerKind::ReLU;
    std::vector<int> inputs;

    // conv
    int in_ch = 0, out_ch = 0, k = 0, stride = 1, pad = 0;
    std::vector<int> seg_channels;
    std::vector<int8_t> qw;  // signed codes, [Co,Ci,k,k]
    double s_w = 0.0, s_a = 0.0, s_adc = 0.0;
    double scale = 0.0;        // digital output scale actually applied
    int shift = 0;             // log2(scale) when power-of-two mode is on
    double scale_error = 0.0;  // |scale - s_w*s_adc| / (s_w*s_adc)
    std::vector<double> bias;  // added after scaling, digital domain
    int64_t conversions = 0;   // ADC conversions per inference
    int64_t cycles = 0;        // computing-latency share per inference

    // linear (digital tail)
    int in_features = 0, out_features = 0;
    std::vector<double> lw, lb;

    // pool
    int pk = 2, ps = 2;

    // act quant
    double aq_step = 0.0;
    int aq_bits = 4;
};

struct IntegerModel {
    MacroConfig macro;
    bool power_of_two = false;
    int input_channels = 3, input_size = 16, num_classes = 2;
    std::vector<IntLayer> layers;
};

// Requires a Phase-2 model (initialized S_W and calibrated S_ADC on every conv).
IntegerModel export_integer_model(const ModelGraph& m, const MacroConfig& macro,
                                  bool power_of_two);

// JSON header + little-endian blobs; 4-bit weights are nibble-packed.
void save_integer_model(const IntegerModel& im, const std::string& path);
IntegerModel load_integer_model(const std::string& path);

}  // namespace cim

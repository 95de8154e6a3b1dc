#pragma once

#include <vector>

#include "cim/graph.hpp"
#include "cim/macro.hpp"

namespace cim {

// Qw = round(clip(W/S, -q_n, q_p)), half away from zero; What = Qw * S.
struct QuantizedWeights {
    Tensor codes;  // integer-valued
    Tensor dequant;
};
QuantizedWeights quantize_weights(const Tensor& w, double s, const ClipBounds& b);

// Fake-quant with a learned step (weight path). Backward: straight-through
// inside the clip range, zero outside; step gradient per the learned-step
// rule with gradient scale 1/sqrt(numel * q_p).
NodeP weight_fakequant(NodeP w, NodeP step, ClipBounds bounds);

// Unsigned fake-quant for activations, range [0, 2^bits - 1].
NodeP act_fakequant(NodeP x, NodeP step, int bits);

// Phase-2 segmented convolution with per-segment ADC partial-sum quantization.
// x carries dequantized activations (integer codes times s_a); w carries the
// folded float weights. Codes are appended to code_sink (image, segment,
// filter, position order) when it is non-null.
struct SegmentedConvSpec {
    double s_w = 0.0;
    double s_a = 0.0;
    double s_adc = 0.0;
    ClipBounds w_bounds;
    ClipBounds adc_bounds;
    int channels_per_bl = 0;
    int stride = 1;
    int pad = 0;
};
NodeP segmented_qconv(NodeP x, NodeP w, NodeP bias, const SegmentedConvSpec& spec,
                      std::vector<double>* code_sink = nullptr);

// Segment channel split: first segments-1 take channels_per_bl, last the rest.
std::vector<int> split_channels(int c_in, int channels_per_bl);

}  // namespace cim

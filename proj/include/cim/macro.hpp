#pragma once

#include <nlohmann/json_fwd.hpp>

namespace cim {

// Geometry and precision of one CIM macro. Immutable after construction.
struct MacroConfig {
    int wordlines = 256;
    int bitlines_per_macro = 256;
    int adc_count = 64;
    int adc_bits = 5;
    int dac_bits = 4;
    int weight_bits = 4;

    // mux_ratio is derived, never stored independently.
    int mux_ratio() const { return bitlines_per_macro / adc_count; }

    void validate() const;

    static MacroConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

// Symmetric clip bounds for signed n-bit quantization.
struct ClipBounds {
    int q_n = 0;  // magnitude of the minimum
    int q_p = 0;  // maximum
};

// floor(wordlines / k^2): input channels one bitline can hold.
int channels_per_bitline(const MacroConfig& macro, int kernel_size);

// q_n = q_p = 2^(bits-1) - 1.
ClipBounds clip_bounds(int bits);

}  // namespace cim

#include "cim/macro.hpp"

#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>

namespace cim {

void MacroConfig::validate() const {
    auto check_count = [](int v, const char* name) {
        if (v < 1) throw std::runtime_error(std::string("macro: ") + name + " must be >= 1");
    };
    check_count(wordlines, "wordlines");
    check_count(bitlines_per_macro, "bitlines");
    check_count(adc_count, "adc_count");
    if (bitlines_per_macro % adc_count != 0)
        throw std::runtime_error("macro: adc_count must divide bitlines exactly");
    auto check_bits = [](int v, const char* name) {
        if (v < 2 || v > 8)
            throw std::runtime_error(std::string("macro: ") + name + " must be in [2, 8]");
    };
    check_bits(adc_bits, "adc_bits");
    check_bits(dac_bits, "dac_bits");
    check_bits(weight_bits, "weight_bits");
}

MacroConfig MacroConfig::from_json(const nlohmann::json& j) {
    MacroConfig m;
    m.wordlines = j.value("wordlines", m.wordlines);
    m.bitlines_per_macro = j.value("bitlines", m.bitlines_per_macro);
    m.adc_count = j.value("adc_count", m.adc_count);
    m.adc_bits = j.value("adc_bits", m.adc_bits);
    m.dac_bits = j.value("dac_bits", m.dac_bits);
    m.weight_bits = j.value("weight_bits", m.weight_bits);
    m.validate();
    if (j.contains("mux_ratio") && j["mux_ratio"].get<int>() != m.mux_ratio())
        throw std::runtime_error("macro: mux_ratio is derived from bitlines/adc_count; "
                                 "inconsistent value rejected");
    return m;
}

nlohmann::json MacroConfig::to_json() const {
    return {{"wordlines", wordlines},      {"bitlines", bitlines_per_macro},
            {"adc_count", adc_count},      {"adc_bits", adc_bits},
            {"dac_bits", dac_bits},        {"weight_bits", weight_bits}};
}

int channels_per_bitline(const MacroConfig& macro, int kernel_size) {
    if (kernel_size < 1) throw std::runtime_error("kernel_size must be >= 1");
    if (kernel_size * kernel_size > macro.wordlines)
        throw std::runtime_error("kernel exceeds macro depth");
    return macro.wordlines / (kernel_size * kernel_size);
}

ClipBounds clip_bounds(int bits) {
    if (bits < 2) throw std::runtime_error("clip_bounds: bits must be >= 2");
    int q = (1 << (bits - 1)) - 1;
    return ClipBounds{q, q};
}

}  // namespace cim

#pragma once

#include <cstdint>
#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "cim/ir.hpp"
#include "cim/macro.hpp"

namespace cim {

// Column layout of one conv layer: each filter occupies `segments` consecutive
// columns, one per input-channel slice.
struct LayerMapping {
    int layer_id = -1;
    int segments = 0;
    int columns = 0;               // segments * c_out
    std::vector<int> seg_channels; // channel count per segment
    std::vector<int> rows_used;    // per segment: seg_channels * k^2
    int c_out = 0;
    int k = 0;
    int out_h = 0, out_w = 0;
};

struct TileSlice {
    int layer_id;
    int columns;
};

struct MappingPlan {
    std::vector<LayerMapping> layers;
    std::vector<std::vector<TileSlice>> tiles;  // greedy, layer order
    int64_t used_bls = 0;
    int64_t adc_activations = 0;
    int64_t load_weight_latency = 0;
    int64_t computing_latency = 0;
    int64_t partial_sum_storage = 0;  // bits
};

LayerMapping segment_layer(const ModelGraph& m, int conv_id, const MacroConfig& macro);

MappingPlan build_plan(const ModelGraph& m, const MacroConfig& macro, int psum_word_bits = -1);

int64_t used_bitlines(const ModelGraph& m, const MacroConfig& macro);
int64_t load_weight_latency(int64_t used_bls, const MacroConfig& macro);
int64_t adc_activations(const ModelGraph& m, const MacroConfig& macro);

// Occupied cells / (target_bl * wordlines). Throws if the plan exceeds the budget.
double macro_usage(const MappingPlan& plan, int64_t target_bl, const MacroConfig& macro);

int64_t occupied_cells(const MappingPlan& plan);

nlohmann::json plan_report(const MappingPlan& plan, const MacroConfig& macro);

// One PPM raster per macro tile; column heights equal rows_used, one color per layer.
void render_mapping(const MappingPlan& plan, const MacroConfig& macro,
                    const std::string& path_prefix);

}  // namespace cim

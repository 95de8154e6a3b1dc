#include "cim/mapper.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <stdexcept>

namespace cim {

LayerMapping segment_layer(const ModelGraph& m, int conv_id, const MacroConfig& macro) {
    const Layer& l = m.layer(conv_id);
    if (l.kind != LayerKind::Conv)
        throw std::runtime_error("segment_layer: layer " + std::to_string(conv_id) +
                                 " is not a conv layer");
    const int cpb = channels_per_bitline(macro, l.k);
    LayerMapping lm;
    lm.layer_id = conv_id;
    lm.c_out = l.out_ch;
    lm.k = l.k;
    int left = l.in_ch;
    while (left > cpb) {
        lm.seg_channels.push_back(cpb);
        left -= cpb;
    }
    lm.seg_channels.push_back(left);
    lm.segments = static_cast<int>(lm.seg_channels.size());
    lm.columns = lm.segments * l.out_ch;
    for (int c : lm.seg_channels) lm.rows_used.push_back(c * l.k * l.k);
    const auto shapes = m.infer_shapes();
    lm.out_h = shapes[static_cast<size_t>(conv_id)].h;
    lm.out_w = shapes[static_cast<size_t>(conv_id)].w;
    return lm;
}

MappingPlan build_plan(const ModelGraph& m, const MacroConfig& macro, int psum_word_bits) {
    if (psum_word_bits < 0) psum_word_bits = macro.adc_bits;
    MappingPlan plan;
    for (int id : m.conv_ids()) plan.layers.push_back(segment_layer(m, id, macro));

    // greedy column packing, layer order, tiles of bitlines_per_macro columns
    const int tile_cols = macro.bitlines_per_macro;
    int cur = tile_cols;  // force a fresh tile on first column
    for (auto& lm : plan.layers) {
        int left = lm.columns;
        while (left > 0) {
            if (cur == tile_cols) {
                plan.tiles.emplace_back();
                cur = 0;
            }
            const int take = std::min(left, tile_cols - cur);
            plan.tiles.back().push_back({lm.layer_id, take});
            cur += take;
            left -= take;
        }
        plan.used_bls += lm.columns;
        plan.adc_activations += int64_t(lm.out_h) * lm.out_w * lm.columns;
    }

    plan.load_weight_latency = load_weight_latency(plan.used_bls, macro);

    for (auto& tile : plan.tiles)
        for (auto& slice : tile) {
            const LayerMapping* lm = nullptr;
            for (auto& l : plan.layers)
                if (l.layer_id == slice.layer_id) lm = &l;
            plan.computing_latency += int64_t(lm->out_h) * lm->out_w *
                                      ((slice.columns + macro.adc_count - 1) / macro.adc_count);
        }

    // a layer needs inter-load psum buffering when its multi-segment columns
    // span more than one macro load
    {
        std::vector<int> tiles_of(plan.layers.size(), 0);
        size_t li = 0;
        for (auto& lm : plan.layers) {
            int n = 0;
            for (auto& tile : plan.tiles)
                for (auto& slice : tile)
                    if (slice.layer_id == lm.layer_id) { ++n; break; }
            tiles_of[li++] = n;
        }
        li = 0;
        for (auto& lm : plan.layers) {
            if (lm.segments > 1 && tiles_of[li] > 1) {
                const int64_t bits = int64_t(lm.out_h) * lm.out_w * lm.c_out * psum_word_bits;
                plan.partial_sum_storage = std::max(plan.partial_sum_storage, bits);
            }
            ++li;
        }
    }
    return plan;
}

int64_t used_bitlines(const ModelGraph& m, const MacroConfig& macro) {
    int64_t n = 0;
    for (int id : m.conv_ids()) n += segment_layer(m, id, macro).columns;
    return n;
}

int64_t load_weight_latency(int64_t used_bls, const MacroConfig& macro) {
    const int64_t b = macro.bitlines_per_macro;
    return (used_bls + b - 1) / b * b;
}

int64_t adc_activations(const ModelGraph& m, const MacroConfig& macro) {
    int64_t n = 0;
    for (int id : m.conv_ids()) {
        const LayerMapping lm = segment_layer(m, id, macro);
        n += int64_t(lm.out_h) * lm.out_w * lm.columns;
    }
    return n;
}

int64_t occupied_cells(const MappingPlan& plan) {
    int64_t cells = 0;
    for (auto& lm : plan.layers)
        for (int r : lm.rows_used) cells += int64_t(r) * lm.c_out;
    return cells;
}

double macro_usage(const MappingPlan& plan, int64_t target_bl, const MacroConfig& macro) {
    if (target_bl <= 0) throw std::runtime_error("macro_usage: target_bl must be positive");
    const double u = double(occupied_cells(plan)) / (double(target_bl) * macro.wordlines);
    if (u > 1.0) throw std::runtime_error("plan exceeds budget");
    return u;
}

nlohmann::json plan_report(const MappingPlan& plan, const MacroConfig& macro) {
    nlohmann::json j;
    j["BLs"] = plan.used_bls;
    j["MACs"] = plan.adc_activations;
    j["Load Weight Latency"] = plan.load_weight_latency;
    j["Computing Latency"] = plan.computing_latency;
    j["Partial sum Storage"] = plan.partial_sum_storage;
    j["tiles"] = plan.tiles.size();
    j["layers"] = nlohmann::json::array();
    for (auto& lm : plan.layers)
        j["layers"].push_back({{"layer", lm.layer_id},
                               {"segments", lm.segments},
                               {"columns", lm.columns},
                               {"rows_used", lm.rows_used},
                               {"out_h", lm.out_h},
                               {"out_w", lm.out_w}});
    (void)macro;
    return j;
}

void render_mapping(const MappingPlan& plan, const MacroConfig& macro,
                    const std::string& path_prefix) {
    // deterministic palette
    static const int palette[][3] = {{230, 25, 75},  {60, 180, 75},   {255, 225, 25},
                                     {0, 130, 200},  {245, 130, 48},  {145, 30, 180},
                                     {70, 240, 240}, {240, 50, 230},  {210, 245, 60},
                                     {250, 190, 212},{0, 128, 128},   {220, 190, 255}};
    const int npal = 12;
    std::map<int, int> color_of;
    for (auto& lm : plan.layers)
        color_of[lm.layer_id] = static_cast<int>(color_of.size()) % npal;
    std::map<int, const LayerMapping*> lm_of;
    for (auto& lm : plan.layers) lm_of[lm.layer_id] = &lm;

    // per-layer running column counter to recover each column's segment height
    std::map<int, int> col_cursor;
    size_t tile_idx = 0;
    const int W = macro.bitlines_per_macro, H = macro.wordlines;
    auto tiles = plan.tiles;
    if (tiles.empty()) tiles.emplace_back();  // empty plan still renders one blank tile
    for (auto& tile : tiles) {
        std::vector<unsigned char> img(static_cast<size_t>(W) * H * 3, 255);
        int col = 0;
        for (auto& slice : tile) {
            const LayerMapping* lm = lm_of[slice.layer_id];
            const int* rgb = palette[color_of[slice.layer_id]];
            for (int i = 0; i < slice.columns; ++i, ++col) {
                const int global_col = col_cursor[slice.layer_id]++;
                const int rows = lm->rows_used[static_cast<size_t>(global_col % lm->segments)];
                for (int r = 0; r < rows; ++r) {
                    unsigned char* px = &img[(static_cast<size_t>(r) * W + col) * 3];
                    px[0] = static_cast<unsigned char>(rgb[0]);
                    px[1] = static_cast<unsigned char>(rgb[1]);
                    px[2] = static_cast<unsigned char>(rgb[2]);
                }
            }
        }
        std::ofstream f(path_prefix + "_tile" + std::to_string(tile_idx++) + ".ppm",
                        std::ios::binary);
        f << "P6\n" << W << " " << H << "\n255\n";
        f.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
    }
}

}  // namespace cim

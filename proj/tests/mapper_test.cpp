#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <random>

#include "cim/mapper.hpp"

using namespace cim;

namespace {

// sequential conv stack, k x k kernels, same-padding so spatial size is kept
ModelGraph conv_stack(int input_channels, int input_size, const std::vector<int>& widths,
                      int k = 3) {
    ModelGraph m;
    m.arch = "stack";
    m.input_channels = input_channels;
    m.input_size = input_size;
    int c = input_channels;
    for (int w : widths) {
        Layer l;
        l.id = static_cast<int>(m.layers.size());
        l.kind = LayerKind::Conv;
        if (l.id > 0) l.inputs = {l.id - 1};
        l.in_ch = c;
        l.out_ch = w;
        l.k = k;
        l.pad = k / 2;
        l.weight = Param(Tensor({w, c, k, k}));
        l.bias = Param(Tensor({w}));
        m.layers.push_back(std::move(l));
        c = w;
    }
    return m;
}

// independent enumeration oracle: walk every column one at a time
struct Enumerated {
    int64_t used_bls = 0;
    int64_t adc_acts = 0;
    int64_t compute = 0;
    int64_t psum_bits = 0;
    int tiles = 0;
};

Enumerated enumerate(const ModelGraph& m, const MacroConfig& macro) {
    Enumerated e;
    const auto shapes = m.infer_shapes();
    int cur = 0;  // columns filled in the current tile
    struct Pending { int cols; int hw; };
    std::vector<int> first_tile, last_tile, segs;
    std::vector<int64_t> hw_of, cout_of;
    for (int id : m.conv_ids()) {
        const Layer& l = m.layer(id);
        const int cpb = channels_per_bitline(macro, l.k);
        const int ns = (l.in_ch + cpb - 1) / cpb;
        const int cols = ns * l.out_ch;
        const int64_t hw = int64_t(shapes[size_t(id)].h) * shapes[size_t(id)].w;
        e.used_bls += cols;
        e.adc_acts += hw * cols;
        int ft = -1, lt = -1;
        int left = cols;
        while (left > 0) {
            if (cur == macro.bitlines_per_macro || e.tiles == 0) {
                ++e.tiles;
                cur = 0;
            }
            const int take = std::min(left, macro.bitlines_per_macro - cur);
            // one ADC pass covers adc_count columns of this slice per position
            e.compute += hw * ((take + macro.adc_count - 1) / macro.adc_count);
            if (ft < 0) ft = e.tiles;
            lt = e.tiles;
            cur += take;
            left -= take;
        }
        first_tile.push_back(ft);
        last_tile.push_back(lt);
        segs.push_back(ns);
        hw_of.push_back(hw);
        cout_of.push_back(l.out_ch);
    }
    for (size_t i = 0; i < segs.size(); ++i)
        if (segs[i] > 1 && last_tile[i] > first_tile[i])
            e.psum_bits = std::max(e.psum_bits, hw_of[i] * cout_of[i] * macro.adc_bits);
    return e;
}

}  // namespace

TEST_SUITE("mapper") {

TEST_CASE("segment_layer boundary cases") {
    MacroConfig macro;
    ModelGraph m = conv_stack(56, 8, {4});
    auto lm = segment_layer(m, 0, macro);
    CHECK(lm.segments == 2);
    CHECK(lm.seg_channels == std::vector<int>{28, 28});
    CHECK(lm.columns == 8);

    m = conv_stack(28, 8, {4});
    CHECK(segment_layer(m, 0, macro).segments == 1);

    m = conv_stack(3, 8, {4});
    lm = segment_layer(m, 0, macro);
    CHECK(lm.segments == 1);
    CHECK(lm.rows_used == std::vector<int>{27});

    // non-conv layer rejected
    ModelGraph toy = build_toy_cnn(2);
    CHECK_THROWS_WITH_AS(segment_layer(toy, 0, macro), doctest::Contains("not a conv"),
                         std::runtime_error);
}

TEST_CASE("used_bitlines hand sums") {
    MacroConfig macro;
    ModelGraph toy = build_toy_cnn(2);
    // 1*16 + 1*32 + 2*64 + 3*64
    CHECK(used_bitlines(toy, macro) == 368);

    CHECK(used_bitlines(conv_stack(3, 8, {8}), macro) == 8);
    CHECK(used_bitlines(conv_stack(29, 8, {10}), macro) == 20);
}

TEST_CASE("load weight latency reference pairs") {
    MacroConfig macro;
    const std::pair<int64_t, int64_t> pairs[] = {
        {38592, 38656}, {8186, 8192}, {3907, 4096}, {1024, 1024}, {511, 512},
        {61440, 61440}, {8148, 8192}, {3963, 4096}, {1021, 1024}, {510, 512},
        {46400, 46592}, {8188, 8192}, {4088, 4096}, {997, 1024},  {512, 512},
        {368, 512},
    };
    for (auto [bls, lat] : pairs) CHECK(load_weight_latency(bls, macro) == lat);
}

TEST_CASE("adc activations") {
    MacroConfig macro;
    CHECK(adc_activations(conv_stack(3, 4, {8}), macro) == 128);  // 16 positions * 8 columns
    // 1x1 spatial, one column
    ModelGraph one = conv_stack(1, 1, {1}, 1);
    CHECK(adc_activations(one, macro) == 1);
    ModelGraph toy = build_toy_cnn(2);
    CHECK(adc_activations(toy, macro) == enumerate(toy, macro).adc_acts);
}

TEST_CASE("computing latency examples and property") {
    MacroConfig macro;
    auto plan64 = build_plan(conv_stack(3, 10, {64}), macro);
    CHECK(plan64.computing_latency == 100);
    auto plan65 = build_plan(conv_stack(3, 10, {65}), macro);
    CHECK(plan65.computing_latency == 200);

    ModelGraph toy = build_toy_cnn(2);
    auto plan = build_plan(toy, macro);
    CHECK(plan.computing_latency * macro.adc_count >= plan.adc_activations);
}

TEST_CASE("partial sum storage") {
    MacroConfig macro;
    // everything in one macro load -> no inter-load buffering
    CHECK(build_plan(conv_stack(3, 8, {16, 16}), macro).partial_sum_storage == 0);

    // 56 -> 512: 2 segments, 1024 columns over 4 tiles, 8x8 output, 5-bit words
    auto plan = build_plan(conv_stack(56, 8, {512}), macro);
    CHECK(plan.partial_sum_storage == 8 * 8 * 512 * 5);
    CHECK(plan.partial_sum_storage == 163840);

    // two qualifying layers -> maximum, not sum
    auto plan2 = build_plan(conv_stack(56, 8, {512, 300}), macro);
    CHECK(plan2.partial_sum_storage == 163840);

    // toy-cnn: last conv (3 segments) straddles the tile boundary at 8x8
    auto tplan = build_plan(build_toy_cnn(2), macro);
    CHECK(tplan.partial_sum_storage == 8 * 8 * 64 * 5);
}

TEST_CASE("macro usage") {
    MacroConfig macro;
    // one full column: 28 channels * 9 rows = 252 of 256 cells
    auto plan = build_plan(conv_stack(28, 8, {1}), macro);
    CHECK(macro_usage(plan, 1, macro) == doctest::Approx(252.0 / 256.0));

    MappingPlan empty;
    CHECK(macro_usage(empty, 10, macro) == 0.0);

    ModelGraph toy = build_toy_cnn(2);
    auto tplan = build_plan(toy, macro);
    int64_t cells = 0;
    for (auto& lm : tplan.layers)
        for (int r : lm.rows_used) cells += int64_t(r) * lm.c_out;
    CHECK(macro_usage(tplan, tplan.used_bls, macro) ==
          doctest::Approx(double(cells) / double(tplan.used_bls * macro.wordlines)));

    CHECK_THROWS_WITH_AS(macro_usage(tplan, 1, macro), doctest::Contains("exceeds budget"),
                         std::runtime_error);
    CHECK_THROWS_AS(macro_usage(tplan, 0, macro), std::runtime_error);
}

TEST_CASE("closed forms match enumeration on random stacks") {
    MacroConfig macro;
    std::mt19937_64 rng(2026);
    std::uniform_int_distribution<int> depth(1, 6), width(1, 96), cin(1, 60), ksel(0, 2);
    const int kernels[] = {1, 3, 5};
    for (int t = 0; t < 50; ++t) {
        std::vector<int> widths;
        const int d = depth(rng);
        for (int i = 0; i < d; ++i) widths.push_back(width(rng));
        const int k = kernels[ksel(rng)];
        ModelGraph m = conv_stack(cin(rng), 8, widths, k);
        const auto plan = build_plan(m, macro);
        const auto e = enumerate(m, macro);
        CHECK(plan.used_bls == e.used_bls);
        CHECK(plan.adc_activations == e.adc_acts);
        CHECK(plan.computing_latency == e.compute);
        CHECK(plan.partial_sum_storage == e.psum_bits);
        CHECK(int64_t(plan.tiles.size()) == e.tiles);
        CHECK(used_bitlines(m, macro) == e.used_bls);
        CHECK(load_weight_latency(plan.used_bls, macro) ==
              (e.used_bls + 255) / 256 * 256);
    }
}

TEST_CASE("render mapping writes one raster per tile") {
    MacroConfig macro;
    ModelGraph toy = build_toy_cnn(2);
    auto plan = build_plan(toy, macro);
    CHECK(plan.tiles.size() == 2);  // ceil(368 / 256)
    render_mapping(plan, macro, "/tmp/map_toy");
    for (int t = 0; t < 2; ++t) {
        std::ifstream f("/tmp/map_toy_tile" + std::to_string(t) + ".ppm", std::ios::binary);
        REQUIRE(f.good());
        std::string magic, dims;
        std::getline(f, magic);
        std::getline(f, dims);
        CHECK(magic == "P6");
        CHECK(dims == "256 256");
        std::remove(("/tmp/map_toy_tile" + std::to_string(t) + ".ppm").c_str());
    }

    MappingPlan empty;
    render_mapping(empty, macro, "/tmp/map_empty");
    std::ifstream f("/tmp/map_empty_tile0.ppm", std::ios::binary);
    CHECK(f.good());
    std::remove("/tmp/map_empty_tile0.ppm");
}

}

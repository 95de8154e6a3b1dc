#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "cim/integer_model.hpp"
#include "cim/mapper.hpp"
#include "cim/qat.hpp"
#include "cim/quant.hpp"
#include "cim/runner.hpp"
#include "cim/sim.hpp"
#include "test_util.hpp"

using namespace cim;
using cim::test::random_tensor;

namespace {

// ActQuant -> Conv -> BN (+ optional digital tail) fixture
ModelGraph quant_conv_model(int c_in, int c_out, int k, int input_size, bool with_tail) {
    ModelGraph m;
    m.arch = "fixture";
    m.input_channels = c_in;
    m.input_size = input_size;
    m.num_classes = 2;
    Layer aq;
    aq.id = 0;
    aq.kind = LayerKind::ActQuant;
    aq.aq.bits = 4;
    aq.aq.step = Param(Tensor::scalar(1.0 / 15.0));
    m.layers.push_back(std::move(aq));
    Layer conv;
    conv.id = 1;
    conv.kind = LayerKind::Conv;
    conv.inputs = {0};
    conv.in_ch = c_in;
    conv.out_ch = c_out;
    conv.k = k;
    conv.pad = k / 2;
    conv.weight = Param(Tensor({c_out, c_in, k, k}));
    conv.bias = Param(Tensor({c_out}));
    m.layers.push_back(std::move(conv));
    Layer bn;
    bn.id = 2;
    bn.kind = LayerKind::BatchNorm;
    bn.inputs = {1};
    bn.gamma = Param(Tensor::full({c_out}, 1.0));
    bn.beta = Param(Tensor({c_out}));
    bn.run_mean = Tensor({c_out});
    bn.run_var = Tensor::full({c_out}, 1.0);
    m.layers.push_back(std::move(bn));
    if (with_tail) {
        Layer fl;
        fl.id = 3;
        fl.kind = LayerKind::Flatten;
        fl.inputs = {2};
        m.layers.push_back(std::move(fl));
        Layer lin;
        lin.id = 4;
        lin.kind = LayerKind::Linear;
        lin.inputs = {3};
        lin.in_features = c_out * input_size * input_size;
        lin.out_features = 2;
        lin.weight = Param(Tensor({2, lin.in_features}));
        lin.bias = Param(Tensor({2}));
        m.layers.push_back(std::move(lin));
    }
    return m;
}

Dataset constant_dataset(double value, int resolution, int n) {
    Dataset d;
    d.classes = 2;
    d.channels = 3;
    d.resolution = resolution;
    for (int i = 0; i < n; ++i) {
        d.images.emplace_back(size_t(3 * resolution * resolution), float(value));
        d.labels.push_back(i % 2);
    }
    return d;
}

}  // namespace

TEST_SUITE("qat-sim") {

TEST_CASE("weight step initialization uses folded weights") {
    std::mt19937_64 rng(3);
    ModelGraph m = quant_conv_model(3, 4, 3, 4, false);
    init_params(m, rng);
    m.layer(2).gamma.value = Tensor::full({4}, 1.7);
    MacroConfig macro;
    init_weight_steps(m, macro);
    REQUIRE(m.layer(1).wq.enabled);
    const Tensor wf = folded_conv_weights(m, 1);
    double mean = 0.0;
    for (double v : wf.v) mean += std::abs(v);
    mean /= double(wf.numel());
    CHECK(m.layer(1).wq.step.value[0] ==
          doctest::Approx(2.0 * mean / std::sqrt(7.0)).epsilon(1e-12));

    // enabled quantizers are left untouched
    const double before = m.layer(1).wq.step.value[0];
    m.layer(1).weight.value[0] += 10.0;
    init_weight_steps(m, macro);
    CHECK(m.layer(1).wq.step.value[0] == before);
}

TEST_CASE("phase1 with zero epochs only initializes steps") {
    std::mt19937_64 rng(5);
    ModelGraph m = build_toy_cnn(2, 8, 3);
    init_params(m, rng);
    const Tensor w0 = m.layer(m.conv_ids()[0]).weight.value;
    Dataset d = synthetic_dataset(2, 8, 8, 7);
    QatConfig cfg;
    cfg.phase1_epochs = 0;
    MacroConfig macro;
    std::mt19937_64 r(9);
    phase1_train(m, d, cfg, macro, r);
    for (int id : m.conv_ids()) {
        CHECK(m.layer(id).wq.enabled);
        CHECK(m.layer(id).wq.step.value[0] > 0.0);
    }
    for (int64_t i = 0; i < w0.numel(); ++i)
        CHECK(m.layer(m.conv_ids()[0]).weight.value[i] == w0[i]);
}

TEST_CASE("ADC calibration hits the known percentile") {
    ModelGraph m = quant_conv_model(3, 1, 1, 4, false);
    m.layer(1).weight.value = Tensor::full({1, 3, 1, 1}, 0.7);
    m.layer(1).wq.step = Param(Tensor::scalar(0.1));
    m.layer(1).wq.enabled = true;
    MacroConfig macro;
    QatConfig cfg;
    std::mt19937_64 r(3);

    // all pixels 1.0 -> qa = 15 everywhere; qw = 7; psum = 3*15*7 = 315
    Dataset ones = constant_dataset(1.0, 4, 8);
    calibrate_adc_step(m, ones, cfg, macro);
    REQUIRE(m.layer(1).pq.enabled);
    // S_ADC = |psum * s_a| / q_p_adc = (315/15)/15, modulo the BN fold of var=1
    CHECK(m.layer(1).pq.step == doctest::Approx(21.0 / 15.0).epsilon(1e-4));

    // degenerate zero input floors at 1e-8
    ModelGraph z = quant_conv_model(3, 1, 1, 4, false);
    z.layer(1).weight.value = Tensor::full({1, 3, 1, 1}, 0.7);
    z.layer(1).wq.step = Param(Tensor::scalar(0.1));
    z.layer(1).wq.enabled = true;
    calibrate_adc_step(z, constant_dataset(0.0, 4, 8), cfg, macro);
    CHECK(z.layer(1).pq.step == 1e-8);

    Dataset empty;
    empty.classes = 2;
    empty.channels = 3;
    empty.resolution = 4;
    CHECK_THROWS_AS(calibrate_adc_step(m, empty, cfg, macro), std::runtime_error);
}

TEST_CASE("calibrated model clips at most a sliver of partial sums") {
    std::mt19937_64 rng(11);
    ModelGraph m = build_toy_cnn(2, 8, 3);
    init_params(m, rng);
    Dataset d = synthetic_dataset(2, 16, 8, 13);
    MacroConfig macro;
    QatConfig cfg;
    cfg.phase1_epochs = 0;
    std::mt19937_64 r(15);
    phase1_train(m, d, cfg, macro, r);
    calibrate_adc_step(m, d, cfg, macro);
    IntegerModel im = export_integer_model(m, macro, false);
    // replay the calibration set and measure real clip events
    std::vector<size_t> idx(d.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Batch b = make_batch(d, idx);
    SimResult res = simulate_inference(im, b.x);
    CHECK(res.trace.conversions > 0);
    CHECK(double(res.trace.clip_events) <= 0.002 * double(res.trace.conversions));
}

TEST_CASE("phase2 requires the earlier stages") {
    std::mt19937_64 rng(17);
    ModelGraph m = build_toy_cnn(2, 8, 3);
    init_params(m, rng);
    Dataset d = synthetic_dataset(2, 8, 8, 19);
    MacroConfig macro;
    QatConfig cfg;
    cfg.phase2_epochs = 1;
    cfg.batch = 8;
    std::mt19937_64 r(21);
    CHECK_THROWS_WITH_AS(phase2_train(m, d, cfg, macro, r),
                         doctest::Contains("qat-phase1"), std::runtime_error);
    cfg.phase1_epochs = 0;
    phase1_train(m, d, cfg, macro, r);
    CHECK_THROWS_WITH_AS(phase2_train(m, d, cfg, macro, r),
                         doctest::Contains("calibrated ADC"), std::runtime_error);
    calibrate_adc_step(m, d, cfg, macro);
    CHECK_NOTHROW(phase2_train(m, d, cfg, macro, r));
}

TEST_CASE("integer export scales and power-of-two rounding") {
    std::mt19937_64 rng(23);
    ModelGraph m = quant_conv_model(3, 4, 3, 8, true);
    init_params(m, rng);
    MacroConfig macro;

    CHECK_THROWS_WITH_AS(export_integer_model(m, macro, false),
                         doctest::Contains("qat-phase2"), std::runtime_error);

    m.layer(1).wq.step = Param(Tensor::scalar(0.5));
    m.layer(1).wq.enabled = true;
    m.layer(1).pq.step = 0.5;  // s_w * s_adc = 0.25 = 2^-2
    m.layer(1).pq.enabled = true;

    IntegerModel exact = export_integer_model(m, macro, true);
    CHECK(exact.layers[1].scale == 0.25);
    CHECK(exact.layers[1].shift == -2);
    CHECK(exact.layers[1].scale_error == 0.0);

    m.layer(1).pq.step = 0.6;  // s = 0.3 -> nearest power of two 0.25
    IntegerModel rounded = export_integer_model(m, macro, true);
    CHECK(rounded.layers[1].scale == 0.25);
    CHECK(rounded.layers[1].scale_error == doctest::Approx(1.0 / 6.0).epsilon(1e-9));

    IntegerModel plain = export_integer_model(m, macro, false);
    CHECK(plain.layers[1].scale == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(plain.layers[1].scale_error == 0.0);

    // codes are the quantized folded weights
    const Tensor wf = folded_conv_weights(m, 1);
    const auto qw = quantize_weights(wf, 0.5, clip_bounds(macro.weight_bits));
    REQUIRE(plain.layers[1].qw.size() == size_t(wf.numel()));
    for (int64_t i = 0; i < wf.numel(); ++i)
        CHECK(double(plain.layers[1].qw[size_t(i)]) == qw.codes[i]);
}

TEST_CASE("integer model file round trip") {
    std::mt19937_64 rng(29);
    ModelGraph m = quant_conv_model(3, 4, 3, 8, true);
    init_params(m, rng);
    m.layer(1).wq.step = Param(Tensor::scalar(0.03));
    m.layer(1).wq.enabled = true;
    m.layer(1).pq.step = 0.7;
    m.layer(1).pq.enabled = true;
    IntegerModel im = export_integer_model(m, MacroConfig{}, false);

    const std::string p = "/tmp/int_model_rt.bin";
    save_integer_model(im, p);
    IntegerModel r = load_integer_model(p);
    REQUIRE(r.layers.size() == im.layers.size());
    CHECK(r.input_size == im.input_size);
    CHECK(r.layers[1].qw == im.layers[1].qw);
    CHECK(r.layers[1].scale == im.layers[1].scale);
    CHECK(r.layers[1].s_adc == im.layers[1].s_adc);
    CHECK(r.layers[1].bias == im.layers[1].bias);
    CHECK(r.layers[1].seg_channels == im.layers[1].seg_channels);
    CHECK(r.layers[4].lw == im.layers[4].lw);

    std::ofstream("/tmp/int_model_bad.bin", std::ios::binary) << "garbage bytes here";
    CHECK_THROWS_WITH_AS(load_integer_model("/tmp/int_model_bad.bin"),
                         doctest::Contains("not an integer model"), std::runtime_error);
    std::remove(p.c_str());
    std::remove("/tmp/int_model_bad.bin");
}

TEST_CASE("dac input quantization") {
    const double s = 0.04;
    Tensor x({4}, {0.0, 15.0 * s, 20.0 * s, -3.0 * s});
    Tensor q = dac_quantize_input(x, s, 4);
    CHECK(q[0] == 0.0);
    CHECK(q[1] == 15.0);
    CHECK(q[2] == 15.0);  // clipped at the top code
    CHECK(q[3] == 0.0);   // unsigned DAC
    CHECK_THROWS_AS(dac_quantize_input(x, 0.0, 4), std::runtime_error);
}

TEST_CASE("hand-built single-wordline simulation") {
    const double s_a = 1.0 / 15.0, s_w = 0.1;
    IntegerModel im;
    im.input_channels = 1;
    im.input_size = 1;
    im.num_classes = 1;
    im.layers.resize(4);
    im.layers[0].kind = LayerKind::ActQuant;
    im.layers[0].aq_step = s_a;
    im.layers[0].aq_bits = 4;
    auto& cv = im.layers[1];
    cv.kind = LayerKind::Conv;
    cv.inputs = {0};
    cv.in_ch = 1;
    cv.out_ch = 1;
    cv.k = 1;
    cv.pad = 0;
    cv.seg_channels = {1};
    cv.qw = {7};
    cv.s_w = s_w;
    cv.s_a = s_a;
    cv.s_adc = 7.0 * s_a;  // p/d = 105/7 = 15
    cv.scale = s_w * cv.s_adc;
    cv.bias = {0.0};
    cv.cycles = 1;
    im.layers[2].kind = LayerKind::Flatten;
    im.layers[2].inputs = {1};
    auto& lin = im.layers[3];
    lin.kind = LayerKind::Linear;
    lin.inputs = {2};
    lin.in_features = 1;
    lin.out_features = 1;
    lin.lw = {1.0};
    lin.lb = {0.0};

    Tensor x({1, 1, 1, 1}, {15.0 * s_a});
    std::map<int, std::vector<double>> codes;
    SimResult res = simulate_inference(im, x, &codes);
    REQUIRE(codes[1].size() == 1);
    CHECK(codes[1][0] == 15.0);  // Qa=15 * Qw=7 = 105, ADC divisor 7
    CHECK(res.logits[0] == doctest::Approx(15.0 * s_w * 7.0 * s_a).epsilon(1e-15));
    CHECK(res.trace.conversions == 1);
    CHECK(res.trace.clip_events == 0);
    CHECK(res.trace.cycles == 1);

    // all-zero input gives all-zero codes and bias-only output
    cv.bias = {0.37};
    SimResult zres = simulate_inference(im, Tensor({1, 1, 1, 1}), nullptr);
    CHECK(zres.logits[0] == doctest::Approx(0.37));

    CHECK_THROWS_WITH_AS(simulate_inference(im, Tensor({1, 2, 1, 1})),
                         doctest::Contains("does not match"), std::runtime_error);
}

TEST_CASE("simulator is bit-exact against the phase-2 training graph") {
    std::mt19937_64 rng(31);
    ModelGraph m = build_toy_cnn(2, 8, 3);
    init_params(m, rng);
    Dataset d = synthetic_dataset(2, 16, 8, 33);
    MacroConfig macro;
    QatConfig cfg;
    cfg.phase1_epochs = 0;
    std::mt19937_64 r(35);
    phase1_train(m, d, cfg, macro, r);
    calibrate_adc_step(m, d, cfg, macro);
    IntegerModel im = export_integer_model(m, macro, false);

    Tensor x = random_tensor({4, 3, 8, 8}, rng, 0.3);
    for (auto& v : x.v) v = std::abs(v);

    std::map<int, std::vector<double>> graph_codes, sim_codes;
    ForwardOptions opts;
    opts.mode = ForwardMode::Phase2Eval;
    opts.macro = &macro;
    opts.code_sink = &graph_codes;
    auto fr = forward_model(m, x, nullptr, opts);
    SimResult sr = simulate_inference(im, x, &sim_codes);

    REQUIRE(graph_codes.size() == sim_codes.size());
    int64_t mismatched = 0, total = 0;
    for (auto& [id, codes] : graph_codes) {
        REQUIRE(sim_codes.count(id) == 1);
        REQUIRE(sim_codes[id].size() == codes.size());
        for (size_t i = 0; i < codes.size(); ++i) {
            ++total;
            if (codes[i] != sim_codes[id][i]) ++mismatched;
        }
    }
    CHECK(total > 0);
    CHECK(mismatched == 0);
    for (int64_t i = 0; i < fr.logits->value.numel(); ++i)
        CHECK(sr.logits[i] == doctest::Approx(fr.logits->value[i]).epsilon(1e-9));

    // trace counters equal the mapper's closed forms (4 images)
    auto plan = build_plan(m, macro);
    CHECK(sr.trace.conversions == 4 * plan.adc_activations);
    CHECK(sr.trace.cycles == 4 * plan.computing_latency);

    // zero input: every first-layer code is zero
    std::map<int, std::vector<double>> zc;
    simulate_inference(im, Tensor({1, 3, 8, 8}), &zc);
    const int first_conv = m.conv_ids()[0];
    for (double c : zc[first_conv]) CHECK(c == 0.0);
}

}

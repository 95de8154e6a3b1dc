#include <doctest.h>

#include <cmath>
#include <random>

#include "cim/mapper.hpp"
#include "cim/morph.hpp"
#include "cim/rounding.hpp"
#include "cim/runner.hpp"
#include "test_util.hpp"

using namespace cim;
using cim::test::random_tensor;

namespace {

// conv+BN chain with given output widths
ModelGraph bn_chain(int input_channels, int input_size, const std::vector<int>& widths) {
    ModelGraph m;
    m.arch = "chain";
    m.input_channels = input_channels;
    m.input_size = input_size;
    int c = input_channels;
    int from = -1;
    for (int w : widths) {
        Layer conv;
        conv.id = static_cast<int>(m.layers.size());
        conv.kind = LayerKind::Conv;
        if (from >= 0) conv.inputs = {from};
        conv.in_ch = c;
        conv.out_ch = w;
        conv.k = 3;
        conv.pad = 1;
        conv.weight = Param(Tensor({w, c, 3, 3}));
        conv.bias = Param(Tensor({w}));
        m.layers.push_back(std::move(conv));
        Layer bn;
        bn.id = static_cast<int>(m.layers.size());
        bn.kind = LayerKind::BatchNorm;
        bn.inputs = {bn.id - 1};
        bn.gamma = Param(Tensor::full({w}, 1.0));
        bn.beta = Param(Tensor({w}));
        bn.run_mean = Tensor({w});
        bn.run_var = Tensor::full({w}, 1.0);
        m.layers.push_back(std::move(bn));
        from = m.layers.back().id;
        c = w;
    }
    return m;
}

Layer& bn_of(ModelGraph& m, int conv_idx) {
    return m.layer(m.bn_after(m.conv_ids()[size_t(conv_idx)]));
}

}  // namespace

TEST_SUITE("morph") {

TEST_CASE("width regularizer hand value") {
    ModelGraph m = bn_chain(3, 8, {1, 1});
    bn_of(m, 0).gamma.value = Tensor({1}, {1.0});
    bn_of(m, 1).gamma.value = Tensor({1}, {2.0});
    const double tau = 0.01;
    // second conv: 9 * (1*2 + 1*1) = 27; first conv (input-fed): 9 * 1
    CHECK(regularizer_F(m, tau) == doctest::Approx(36.0));
    ModelGraph first_only = bn_chain(3, 8, {1});
    CHECK(regularizer_F(first_only, tau) == doctest::Approx(9.0));
}

TEST_CASE("width regularizer vanishes with zero gammas and is homogeneous") {
    ModelGraph m = bn_chain(3, 8, {4, 4});
    for (int i = 0; i < 2; ++i)
        bn_of(m, i).gamma.value = Tensor({4});
    CHECK(regularizer_F(m, 0.01) == 0.0);

    std::mt19937_64 rng(3);
    for (int i = 0; i < 2; ++i) {
        Tensor g = random_tensor({4}, rng, 0.5);
        for (auto& v : g.v) v += (v >= 0 ? 0.5 : -0.5);  // keep |gamma| above tau
        bn_of(m, i).gamma.value = g;
    }
    const double f1 = regularizer_F(m, 0.01);
    for (int i = 0; i < 2; ++i)
        for (auto& v : bn_of(m, i).gamma.value.v) v *= 2.0;
    CHECK(regularizer_F(m, 0.01) == doctest::Approx(2.0 * f1));
}

TEST_CASE("regularizer requires a BN after every conv") {
    ModelGraph m;
    Layer conv;
    conv.id = 0;
    conv.kind = LayerKind::Conv;
    conv.in_ch = 3;
    conv.out_ch = 4;
    conv.k = 3;
    conv.pad = 1;
    conv.weight = Param(Tensor({4, 3, 3, 3}));
    m.layers.push_back(std::move(conv));
    CHECK_THROWS_WITH_AS(regularizer_F(m, 0.01), doctest::Contains("batch-norm"),
                         std::runtime_error);
}

TEST_CASE("zero lambda adds no gamma gradient") {
    ModelGraph m = bn_chain(3, 8, {4, 4});
    add_regularizer_grads(m, 0.01, 0.0);
    for (int i = 0; i < 2; ++i) CHECK(bn_of(m, i).gamma.grad.empty());

    add_regularizer_grads(m, 0.01, 1e-3);
    double total = 0.0;
    for (int i = 0; i < 2; ++i)
        for (int64_t j = 0; j < bn_of(m, i).gamma.grad.numel(); ++j)
            total += std::abs(bn_of(m, i).gamma.grad[j]);
    CHECK(total > 0.0);
}

TEST_CASE("prune keeps models without small gammas intact") {
    std::mt19937_64 rng(5);
    ModelGraph m = bn_chain(3, 8, {6, 4});
    init_params(m, rng);
    ModelGraph p = prune_zero_gamma(m, 1e-2);  // all gammas are 1.0
    REQUIRE(p.layers.size() == m.layers.size());
    CHECK(p.layer(0).out_ch == 6);
    CHECK(p.layer(2).in_ch == 6);
    CHECK(p.layer(2).out_ch == 4);
}

TEST_CASE("prune drops masked channels and rewires consumers") {
    std::mt19937_64 rng(7);
    ModelGraph m = bn_chain(3, 8, {4, 5});
    init_params(m, rng);
    bn_of(m, 0).gamma.value = Tensor({4}, {0.0, 1.0, 0.0, 1.0});
    ModelGraph p = prune_zero_gamma(m, 1e-2);
    CHECK(p.layer(0).out_ch == 2);
    CHECK(p.layer(2).in_ch == 2);
    CHECK(p.layer(2).out_ch == 5);
    // surviving channels keep their filters (channels 1 and 3)
    const Tensor& w0 = m.layer(0).weight.value;
    const Tensor& pw0 = p.layer(0).weight.value;
    const int64_t per = 3 * 3 * 3;
    for (int64_t i = 0; i < per; ++i) {
        CHECK(pw0[i] == w0[per + i]);
        CHECK(pw0[per + i] == w0[3 * per + i]);
    }
}

TEST_CASE("pruned forward matches the masked model") {
    std::mt19937_64 rng(9);
    ModelGraph m = build_toy_cnn(2, 8, 3);
    init_params(m, rng);
    // silence a third of the last two conv groups: gamma and beta to zero so the
    // channels are exactly dead in inference mode
    for (int ci = 2; ci < 4; ++ci) {
        Layer& bn = bn_of(m, ci);
        for (int64_t i = 0; i < bn.gamma.value.numel(); i += 3) {
            bn.gamma.value[i] = 0.0;
            bn.beta.value[i] = 0.0;
        }
    }
    ModelGraph p = prune_zero_gamma(m, 1e-2);
    CHECK(param_count(p) < param_count(m));
    ForwardOptions opts;
    opts.mode = ForwardMode::FloatEval;
    for (int t = 0; t < 3; ++t) {
        Tensor x = random_tensor({2, 3, 8, 8}, rng, 0.5);
        auto a = forward_model(m, x, nullptr, opts);
        auto b = forward_model(p, x, nullptr, opts);
        for (int64_t i = 0; i < a.logits->value.numel(); ++i)
            CHECK(b.logits->value[i] == doctest::Approx(a.logits->value[i]).epsilon(1e-6));
    }
    MacroConfig macro;
    CHECK(used_bitlines(p, macro) < used_bitlines(m, macro));
}

TEST_CASE("prune never empties a channel group") {
    std::mt19937_64 rng(11);
    ModelGraph m = bn_chain(3, 8, {4, 4});
    init_params(m, rng);
    bn_of(m, 0).gamma.value = Tensor({4}, {1e-6, 3e-3, 2e-3, 1e-5});
    ModelGraph p = prune_zero_gamma(m, 1e-2);
    CHECK(p.layer(0).out_ch == 1);  // argmax |gamma| survives
    CHECK(p.layer(0).weight.value.dim(0) == 1);
}

TEST_CASE("expansion ratio search matches a brute-force grid scan") {
    MacroConfig macro;
    std::mt19937_64 rng(13);
    std::uniform_int_distribution<int> depth(1, 5), width(2, 80), tgt(50, 4000);
    for (int t = 0; t < 50; ++t) {
        std::vector<int> channels, kernels;
        const int d = depth(rng);
        for (int i = 0; i < d; ++i) {
            channels.push_back(width(rng));
            kernels.push_back(3);
        }
        const int64_t target = tgt(rng);
        const double step = 0.001, cap = 64.0;
        const auto rr = find_expansion_ratio(channels, kernels, 3, macro, target, step, cap);

        // independent scan over the same grid
        std::vector<ConvShapeInfo> convs;
        int prev = 3;
        for (size_t i = 0; i < channels.size(); ++i) {
            convs.push_back({i == 0, prev, channels[i], kernels[i]});
            prev = channels[i];
        }
        if (expansion_lhs(convs, macro, 1.0) > target) {
            CHECK(rr.no_headroom);
            CHECK(rr.ratio == 1.0);
            continue;
        }
        double best = 1.0;
        bool capped = false;
        for (int64_t i = 1;; ++i) {
            const double R = 1.0 + double(i) * step;
            if (R > cap) { capped = true; break; }
            int64_t lhs = 0;
            for (const auto& c : convs) {
                const int64_t ci = c.from_input ? c.c_in
                                                : int64_t(round_half_away(c.c_in * R));
                const int64_t co = int64_t(round_half_away(c.c_out * R));
                const int cpb = channels_per_bitline(macro, c.k);
                lhs += (ci + cpb - 1) / cpb * co;
            }
            if (lhs > target) break;
            best = R;
        }
        CHECK(rr.ratio == doctest::Approx(best));
        CHECK(rr.capped == capped);
        CHECK(expansion_lhs(convs, macro, rr.ratio) <= target);
    }
}

TEST_CASE("expansion ratio boundary and cap") {
    MacroConfig macro;
    // target exactly at R=1 usage and wide enough that the very first grid
    // step already violates the budget: round(1500 * 1.001) = 1501
    std::vector<ConvShapeInfo> wide{{true, 3, 1500, 3}};
    const int64_t wide_base = expansion_lhs(wide, macro, 1.0);
    CHECK(wide_base == 1500);
    auto rr = find_expansion_ratio(wide, macro, wide_base, 0.001);
    CHECK(rr.ratio == 1.0);
    CHECK(!rr.no_headroom);

    const std::vector<int> ch{16, 32}, ks{3, 3};
    std::vector<ConvShapeInfo> convs{{true, 3, 16, 3}, {false, 16, 32, 3}};
    const int64_t base = expansion_lhs(convs, macro, 1.0);

    // huge budget hits the cap
    rr = find_expansion_ratio(ch, ks, 3, macro, 1000000000, 0.001);
    CHECK(rr.capped);
    CHECK(rr.ratio == doctest::Approx(64.0).epsilon(1e-3));

    // impossible budget
    rr = find_expansion_ratio(ch, ks, 3, macro, base - 1, 0.001);
    CHECK(rr.no_headroom);
    CHECK(rr.ratio == 1.0);
}

TEST_CASE("expand_model scales channel groups") {
    std::mt19937_64 rng(17);
    ModelGraph m = bn_chain(3, 8, {16, 32});
    init_params(m, rng);
    const Tensor w0 = m.layer(0).weight.value;

    std::mt19937_64 r1(1);
    ModelGraph same = expand_model(m, 1.0, r1);
    CHECK(same.layer(0).out_ch == 16);
    CHECK(same.layer(2).out_ch == 32);
    for (int64_t i = 0; i < w0.numel(); ++i) CHECK(same.layer(0).weight.value[i] == w0[i]);

    std::mt19937_64 r2(2);
    ModelGraph big = expand_model(m, 2.0, r2);
    CHECK(big.layer(0).out_ch == 32);
    CHECK(big.layer(2).in_ch == 32);
    CHECK(big.layer(2).out_ch == 64);
    CHECK(big.layer(1).gamma.value.numel() == 32);
    // original filters preserved in the leading block
    for (int64_t i = 0; i < w0.numel(); ++i) CHECK(big.layer(0).weight.value[i] == w0[i]);
    // fresh BN entries are identity
    CHECK(big.layer(1).gamma.value[31] == 1.0);
    CHECK(big.layer(1).run_var[31] == 1.0);

    std::mt19937_64 r3(3);
    CHECK_THROWS_AS(expand_model(m, 0.5, r3), std::runtime_error);
}

TEST_CASE("morph_iterate with zero iterations is the identity") {
    std::mt19937_64 rng(19);
    ModelGraph m = build_toy_cnn(2, 8, 3);
    init_params(m, rng);
    Dataset train = synthetic_dataset(2, 8, 8, 21);
    Dataset test = synthetic_dataset(2, 4, 8, 22);
    MacroConfig macro;
    MorphConfig cfg;
    cfg.iterations = 0;
    cfg.target_bl = 368;
    std::mt19937_64 r(23);
    MorphReport rep;
    ModelGraph out = morph_iterate(m, cfg, train, test, macro, r, &rep);
    REQUIRE(out.layers.size() == m.layers.size());
    for (size_t i = 0; i < m.layers.size(); ++i)
        for (int64_t j = 0; j < m.layers[i].weight.value.numel(); ++j)
            CHECK(out.layers[i].weight.value[j] == m.layers[i].weight.value[j]);
    CHECK(rep.iterations.empty());
}

TEST_CASE("morph_iterate respects the bitline budget") {
    std::mt19937_64 rng(29);
    ModelGraph m = build_toy_cnn(2, 8, 3);
    init_params(m, rng);
    // pre-zero gammas so the (zero-epoch) shrink stage leads to real pruning
    for (int ci = 2; ci < 4; ++ci) {
        Layer& bn = bn_of(m, ci);
        for (int64_t i = 0; i < bn.gamma.value.numel(); i += 2) {
            bn.gamma.value[i] = 0.0;
            bn.beta.value[i] = 0.0;
        }
    }
    Dataset train = synthetic_dataset(2, 16, 8, 31);
    Dataset test = synthetic_dataset(2, 8, 8, 32);
    MacroConfig macro;
    MorphConfig cfg;
    cfg.iterations = 1;
    cfg.shrink_epochs = 0;
    cfg.finetune_epochs = 1;
    cfg.batch = 8;
    cfg.target_bl = 368;
    std::mt19937_64 r(33);
    MorphReport rep;
    ModelGraph out = morph_iterate(m, cfg, train, test, macro, r, &rep);
    REQUIRE(rep.iterations.size() == 1);
    CHECK(rep.iterations[0].used_bls <= 368);
    CHECK(used_bitlines(out, macro) <= 368);
    CHECK(rep.iterations[0].ratio >= 1.0);
    CHECK(rep.iterations[0].macro_usage > 0.0);
}

TEST_CASE("morph config validation") {
    MorphConfig cfg;
    cfg.target_bl = 368;
    CHECK_NOTHROW(cfg.validate());
    cfg.target_bl = 0;
    CHECK_THROWS_AS(cfg.validate(), std::runtime_error);
    cfg.target_bl = 368;
    cfg.ratio_step = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::runtime_error);
}

}

#include "cim/morph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "cim/mapper.hpp"
#include "cim/rounding.hpp"
#include "cim/runner.hpp"

namespace cim {

void MorphConfig::validate() const {
    if (lambda_max < 0) throw std::runtime_error("morph config: lambda_max must be >= 0");
    if (tau <= 0) throw std::runtime_error("morph config: tau must be > 0");
    if (ratio_step <= 0) throw std::runtime_error("morph config: ratio step must be > 0");
    if (target_bl < 1) throw std::runtime_error("morph config: target_bl must be >= 1");
    if (iterations < 0) throw std::runtime_error("morph config: iterations must be >= 0");
}

namespace {

struct RegTerm {
    double k2 = 9.0;
    int own_bn = -1;
    std::vector<int> prev_bns;  // empty when the conv reads the model input
};

std::vector<RegTerm> reg_terms(const ModelGraph& m) {
    const ChannelGroups cg = analyze_channels(m);
    std::vector<RegTerm> terms;
    for (int cid : m.conv_ids()) {
        const Layer& l = m.layer(cid);
        RegTerm t;
        t.k2 = double(l.k) * l.k;
        t.own_bn = m.bn_after(cid);
        if (t.own_bn < 0)
            throw std::runtime_error("conv layer " + std::to_string(cid) +
                                     " has no batch-norm successor");
        const int g_in = l.inputs.empty() ? ChannelGroups::kInputGroup
                                          : cg.group_of[static_cast<size_t>(l.inputs[0])];
        if (g_in != ChannelGroups::kInputGroup && g_in >= 0)
            t.prev_bns = cg.groups[static_cast<size_t>(g_in)].bn_members;
        terms.push_back(std::move(t));
    }
    return terms;
}

// |gamma| sum and count above tau for one BN.
void gamma_stats(const Layer& bn, double tau, double* sum, int* active) {
    *sum = 0.0;
    *active = 0;
    for (int64_t i = 0; i < bn.gamma.value.numel(); ++i) {
        const double a = std::abs(bn.gamma.value[i]);
        *sum += a;
        if (a > tau) ++*active;
    }
}

double sign(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

Tensor take_dim0(const Tensor& t, const std::vector<int>& keep) {
    std::vector<int> shape = t.shape;
    const int64_t inner = t.numel() / t.dim(0);
    shape[0] = static_cast<int>(keep.size());
    Tensor r(shape);
    for (size_t n = 0; n < keep.size(); ++n)
        std::copy_n(t.v.data() + int64_t(keep[n]) * inner, inner,
                    r.v.data() + int64_t(n) * inner);
    return r;
}

Tensor take_dim1(const Tensor& t, const std::vector<int>& keep) {
    std::vector<int> shape = t.shape;
    const int64_t d0 = t.dim(0), d1 = t.dim(1);
    const int64_t inner = t.numel() / (d0 * d1);
    shape[1] = static_cast<int>(keep.size());
    Tensor r(shape);
    for (int64_t a = 0; a < d0; ++a)
        for (size_t n = 0; n < keep.size(); ++n)
            std::copy_n(t.v.data() + (a * d1 + keep[n]) * inner, inner,
                        r.v.data() + (a * int64_t(keep.size()) + int64_t(n)) * inner);
    return r;
}

// Linear columns are laid out channel-major: [c_in blocks of `block` features].
Tensor take_linear_cols(const Tensor& w, const std::vector<int>& keep, int block) {
    const int64_t rows = w.dim(0), cols = w.dim(1);
    const int64_t new_cols = int64_t(keep.size()) * block;
    Tensor r({static_cast<int>(rows), static_cast<int>(new_cols)});
    for (int64_t y = 0; y < rows; ++y)
        for (size_t n = 0; n < keep.size(); ++n)
            std::copy_n(w.v.data() + y * cols + int64_t(keep[n]) * block, block,
                        r.v.data() + y * new_cols + int64_t(n) * block);
    return r;
}

}  // namespace

double regularizer_F(const ModelGraph& m, double tau) {
    double F = 0.0;
    for (const RegTerm& t : reg_terms(m)) {
        double own_sum;
        int own_active;
        gamma_stats(m.layer(t.own_bn), tau, &own_sum, &own_active);
        double prev_sum = 0.0;
        int prev_active = 0;
        for (int b : t.prev_bns) {
            double s;
            int a;
            gamma_stats(m.layer(b), tau, &s, &a);
            prev_sum += s;
            prev_active += a;
        }
        F += t.k2 * (own_active * own_sum + prev_active * prev_sum);
    }
    return F;
}

void add_regularizer_grads(ModelGraph& m, double tau, double lambda) {
    if (lambda == 0.0) return;
    for (const RegTerm& t : reg_terms(m)) {
        Layer& own = m.layer(t.own_bn);
        double own_sum;
        int own_active;
        gamma_stats(own, tau, &own_sum, &own_active);
        int prev_active = 0;
        for (int b : t.prev_bns) {
            double s;
            int a;
            gamma_stats(m.layer(b), tau, &s, &a);
            prev_active += a;
        }
        {
            Tensor g(own.gamma.value.shape);
            for (int64_t i = 0; i < g.numel(); ++i)
                g[i] = lambda * t.k2 * own_active * sign(own.gamma.value[i]);
            own.gamma.accumulate_grad(g);
        }
        for (int b : t.prev_bns) {
            Layer& prev = m.layer(b);
            Tensor g(prev.gamma.value.shape);
            for (int64_t i = 0; i < g.numel(); ++i)
                g[i] = lambda * t.k2 * prev_active * sign(prev.gamma.value[i]);
            prev.gamma.accumulate_grad(g);
        }
    }
}

double shrink_train(ModelGraph& m, const MorphConfig& cfg, const Dataset& data,
                    std::mt19937_64& rng) {
    set_stage_trainability(m, Stage::Shrink);
    TrainConfig tc;
    tc.epochs = cfg.shrink_epochs;
    tc.batch = cfg.batch;
    tc.lr = cfg.shrink_lr;
    double lambda = 0.0;
    auto pre = [&](int epoch) {
        const double f =
            cfg.ramp_epochs > 0 ? std::min(1.0, double(epoch) / cfg.ramp_epochs) : 1.0;
        lambda = cfg.lambda_max * f;
    };
    auto post = [&]() { add_regularizer_grads(m, cfg.tau, lambda); };
    return train(m, data, tc, ForwardMode::FloatTrain, rng, pre, post);
}

ModelGraph prune_zero_gamma(const ModelGraph& m, double tau) {
    ModelGraph r = m;
    const ChannelGroups cg = analyze_channels(r);
    std::vector<std::vector<int>> keep(cg.groups.size());

    for (size_t g = 0; g < cg.groups.size(); ++g) {
        const ChannelGroup& grp = cg.groups[g];
        if (g == ChannelGroups::kInputGroup || grp.bn_members.empty()) {
            keep[g].resize(static_cast<size_t>(grp.channels));
            for (int i = 0; i < grp.channels; ++i) keep[g][static_cast<size_t>(i)] = i;
            continue;
        }
        for (int c = 0; c < grp.channels; ++c) {
            bool live = false;
            for (int b : grp.bn_members)
                if (std::abs(r.layer(b).gamma.value[c]) > tau) {
                    live = true;
                    break;
                }
            if (live) keep[g].push_back(c);
        }
        if (keep[g].empty()) {
            const Layer& bn = r.layer(grp.bn_members[0]);
            int best = 0;
            for (int c = 1; c < grp.channels; ++c)
                if (std::abs(bn.gamma.value[c]) > std::abs(bn.gamma.value[best])) best = c;
            keep[g].push_back(best);
            std::fprintf(stderr,
                         "warning: all %d channels of group %zu fell below the prune "
                         "threshold; keeping the strongest one\n",
                         grp.channels, g);
        }
    }

    for (size_t g = 0; g < cg.groups.size(); ++g) {
        if (g == ChannelGroups::kInputGroup) continue;
        const ChannelGroup& grp = cg.groups[g];
        if (static_cast<int>(keep[g].size()) == grp.channels) continue;
        const std::vector<int>& ks = keep[g];
        for (int cid : grp.conv_producers) {
            Layer& l = r.layer(cid);
            l.weight = Param(take_dim0(l.weight.value, ks), l.weight.trainable);
            if (l.has_bias) l.bias = Param(take_dim0(l.bias.value, ks), l.bias.trainable);
            l.out_ch = static_cast<int>(ks.size());
        }
        for (int bid : grp.bn_members) {
            Layer& l = r.layer(bid);
            l.gamma = Param(take_dim0(l.gamma.value, ks), l.gamma.trainable);
            l.beta = Param(take_dim0(l.beta.value, ks), l.beta.trainable);
            l.run_mean = take_dim0(l.run_mean, ks);
            l.run_var = take_dim0(l.run_var, ks);
        }
        for (int cid : grp.conv_consumers) {
            Layer& l = r.layer(cid);
            l.weight = Param(take_dim1(l.weight.value, ks), l.weight.trainable);
            l.in_ch = static_cast<int>(ks.size());
        }
        for (int lid : grp.linear_consumers) {
            Layer& l = r.layer(lid);
            const int block = l.in_features / grp.channels;
            l.weight = Param(take_linear_cols(l.weight.value, ks, block), l.weight.trainable);
            l.in_features = static_cast<int>(ks.size()) * block;
        }
    }
    r.validate();
    return r;
}

std::vector<ConvShapeInfo> conv_chain(const ModelGraph& m) {
    const ChannelGroups cg = analyze_channels(m);
    std::vector<ConvShapeInfo> chain;
    for (int cid : m.conv_ids()) {
        const Layer& l = m.layer(cid);
        const int g_in = l.inputs.empty() ? ChannelGroups::kInputGroup
                                          : cg.group_of[static_cast<size_t>(l.inputs[0])];
        ConvShapeInfo s;
        s.from_input = (g_in == ChannelGroups::kInputGroup);
        s.c_in = l.in_ch;
        s.c_out = l.out_ch;
        s.k = l.k;
        chain.push_back(s);
    }
    return chain;
}

int64_t expansion_lhs(const std::vector<ConvShapeInfo>& convs, const MacroConfig& macro,
                      double R) {
    int64_t total = 0;
    for (const ConvShapeInfo& c : convs) {
        const int64_t ci =
            c.from_input ? c.c_in : static_cast<int64_t>(round_half_away(c.c_in * R));
        const int64_t co = static_cast<int64_t>(round_half_away(c.c_out * R));
        const int64_t cpb = channels_per_bitline(macro, c.k);
        total += ((ci + cpb - 1) / cpb) * co;
    }
    return total;
}

RatioResult find_expansion_ratio(const std::vector<ConvShapeInfo>& convs,
                                 const MacroConfig& macro, int64_t target_bl, double step,
                                 double cap) {
    RatioResult res;
    if (expansion_lhs(convs, macro, 1.0) > target_bl) {
        std::fprintf(stderr, "warning: no expansion headroom\n");
        res.no_headroom = true;
        return res;
    }
    double best = 1.0;
    for (int64_t i = 1;; ++i) {
        const double R = 1.0 + double(i) * step;
        if (R > cap) {
            std::fprintf(stderr, "warning: expansion ratio capped at %g\n", cap);
            res.capped = true;
            break;
        }
        if (expansion_lhs(convs, macro, R) > target_bl) break;
        best = R;
    }
    res.ratio = best;
    return res;
}

RatioResult find_expansion_ratio(const std::vector<int>& channels,
                                 const std::vector<int>& kernels, int img_channels,
                                 const MacroConfig& macro, int64_t target_bl, double step,
                                 double cap) {
    if (channels.size() != kernels.size())
        throw std::runtime_error("find_expansion_ratio: channel/kernel count mismatch");
    std::vector<ConvShapeInfo> convs;
    int prev = img_channels;
    for (size_t i = 0; i < channels.size(); ++i) {
        ConvShapeInfo s;
        s.from_input = (i == 0);
        s.c_in = prev;
        s.c_out = channels[i];
        s.k = kernels[i];
        convs.push_back(s);
        prev = channels[i];
    }
    return find_expansion_ratio(convs, macro, target_bl, step, cap);
}

ModelGraph expand_model(const ModelGraph& m, double R, std::mt19937_64& rng) {
    if (R < 1.0) throw std::runtime_error("expand_model: ratio must be >= 1");
    ModelGraph r = m;
    const ChannelGroups cg = analyze_channels(r);
    std::vector<int> new_size(cg.groups.size());
    for (size_t g = 0; g < cg.groups.size(); ++g)
        new_size[g] = (g == ChannelGroups::kInputGroup)
                          ? cg.groups[g].channels
                          : static_cast<int>(round_half_away(cg.groups[g].channels * R));

    std::normal_distribution<double> gauss(0.0, 1.0);
    for (Layer& l : r.layers) {
        switch (l.kind) {
            case LayerKind::Conv: {
                const int g_out = cg.group_of[static_cast<size_t>(l.id)];
                const int g_in = l.inputs.empty()
                                     ? ChannelGroups::kInputGroup
                                     : cg.group_of[static_cast<size_t>(l.inputs[0])];
                const int co = new_size[static_cast<size_t>(g_out)];
                const int ci = new_size[static_cast<size_t>(g_in)];
                if (co == l.out_ch && ci == l.in_ch) break;
                Tensor w({co, ci, l.k, l.k});
                const double std_dev = std::sqrt(2.0 / (double(ci) * l.k * l.k));
                for (int o = 0; o < co; ++o)
                    for (int i = 0; i < ci; ++i)
                        for (int p = 0; p < l.k * l.k; ++p) {
                            const int64_t dst = ((int64_t(o) * ci + i) * l.k * l.k) + p;
                            if (o < l.out_ch && i < l.in_ch)
                                w[dst] = l.weight.value[((int64_t(o) * l.in_ch + i) * l.k * l.k) + p];
                            else
                                w[dst] = std_dev * gauss(rng);
                        }
                l.weight = Param(std::move(w), l.weight.trainable);
                if (l.has_bias) {
                    Tensor b({co});
                    for (int o = 0; o < std::min(co, l.out_ch); ++o) b[o] = l.bias.value[o];
                    l.bias = Param(std::move(b), l.bias.trainable);
                }
                l.out_ch = co;
                l.in_ch = ci;
                break;
            }
            case LayerKind::BatchNorm: {
                const int g = cg.group_of[static_cast<size_t>(l.id)];
                const int c = new_size[static_cast<size_t>(g)];
                const int old_c = l.gamma.value.dim(0);
                if (c == old_c) break;
                Tensor gm = Tensor::full({c}, 1.0), bt({c}), mu({c}), var = Tensor::full({c}, 1.0);
                for (int i = 0; i < old_c; ++i) {
                    gm[i] = l.gamma.value[i];
                    bt[i] = l.beta.value[i];
                    mu[i] = l.run_mean[i];
                    var[i] = l.run_var[i];
                }
                l.gamma = Param(std::move(gm), l.gamma.trainable);
                l.beta = Param(std::move(bt), l.beta.trainable);
                l.run_mean = std::move(mu);
                l.run_var = std::move(var);
                break;
            }
            case LayerKind::Linear: {
                const int g = cg.group_of[static_cast<size_t>(l.inputs[0])];
                if (g < 0 || g == ChannelGroups::kInputGroup) break;
                const int old_c = cg.groups[static_cast<size_t>(g)].channels;
                const int c = new_size[static_cast<size_t>(g)];
                if (c == old_c) break;
                const int block = l.in_features / old_c;
                const int new_in = c * block;
                Tensor w({l.out_features, new_in});
                const double std_dev = std::sqrt(2.0 / double(new_in));
                for (int y = 0; y < l.out_features; ++y)
                    for (int ch = 0; ch < c; ++ch)
                        for (int p = 0; p < block; ++p) {
                            const int64_t dst = int64_t(y) * new_in + int64_t(ch) * block + p;
                            if (ch < old_c)
                                w[dst] = l.weight.value[int64_t(y) * l.in_features +
                                                        int64_t(ch) * block + p];
                            else
                                w[dst] = std_dev * gauss(rng);
                        }
                l.weight = Param(std::move(w), l.weight.trainable);
                l.in_features = new_in;
                break;
            }
            default: break;
        }
    }
    r.validate();
    return r;
}

nlohmann::json MorphReport::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const MorphIterationLog& it : iterations)
        arr.push_back({{"iteration", it.iteration},
                       {"params", it.params},
                       {"used_bls", it.used_bls},
                       {"ratio", it.ratio},
                       {"macro_usage", it.macro_usage},
                       {"accuracy", it.accuracy}});
    return nlohmann::json{{"iterations", arr}};
}

ModelGraph morph_iterate(const ModelGraph& m0, const MorphConfig& cfg, const Dataset& train_data,
                         const Dataset& test_data, const MacroConfig& macro,
                         std::mt19937_64& rng, MorphReport* report,
                         const std::function<void(int, const ModelGraph&)>& on_iteration) {
    cfg.validate();
    ModelGraph m = m0;
    for (int it = 0; it < cfg.iterations; ++it) {
        shrink_train(m, cfg, train_data, rng);
        m = prune_zero_gamma(m, cfg.tau);
        const RatioResult rr =
            find_expansion_ratio(conv_chain(m), macro, cfg.target_bl, cfg.ratio_step,
                                 cfg.ratio_cap);
        m = expand_model(m, rr.ratio, rng);
        if (cfg.finetune_each_iteration && cfg.finetune_epochs > 0) {
            set_stage_trainability(m, Stage::Finetune);
            TrainConfig tc;
            tc.epochs = cfg.finetune_epochs;
            tc.batch = cfg.batch;
            tc.lr = cfg.finetune_lr;
            train(m, train_data, tc, ForwardMode::FloatTrain, rng);
        }
        if (report) {
            MorphIterationLog log;
            log.iteration = it;
            log.params = param_count(m);
            const MappingPlan plan = build_plan(m, macro);
            log.used_bls = plan.used_bls;
            log.ratio = rr.ratio;
            // raw fraction, not macro_usage(): an over-budget iteration is a
            // reportable state here, not an error
            log.macro_usage = double(occupied_cells(plan)) /
                              (double(cfg.target_bl) * macro.wordlines);
            log.accuracy = evaluate(m, test_data, ForwardMode::FloatEval);
            report->iterations.push_back(log);
        }
        if (on_iteration) on_iteration(it, m);
    }
    return m;
}

}  // namespace cim

#include "cim/qat.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cim/ops.hpp"
#include "cim/quant.hpp"
#include "cim/rounding.hpp"
#include "cim/runner.hpp"

namespace cim {

// W' = W * gamma/sqrt(running_var + eps), matching the in-graph fold.
Tensor folded_conv_weights(const ModelGraph& m, int conv_id) {
    const Layer& l = m.layer(conv_id);
    Tensor w = l.weight.value;
    const int bn_id = m.bn_after(conv_id);
    if (bn_id >= 0) {
        const Layer& bn = m.layer(bn_id);
        const int64_t per_filter = w.numel() / l.out_ch;
        for (int o = 0; o < l.out_ch; ++o) {
            // same expression as the in-graph fold so codes agree exactly
            const double s = bn.gamma.value[o] * (1.0 / std::sqrt(bn.run_var[o] + bn.eps));
            for (int64_t i = 0; i < per_filter; ++i) w[int64_t(o) * per_filter + i] *= s;
        }
    }
    return w;
}

// b' = beta - mu*s (BN present; the conv's own bias is dropped by the fold),
// else the conv bias, else zeros.
Tensor folded_conv_bias(const ModelGraph& m, int conv_id) {
    const Layer& l = m.layer(conv_id);
    const int bn_id = m.bn_after(conv_id);
    if (bn_id < 0) return l.has_bias ? l.bias.value : Tensor({l.out_ch});
    const Layer& bn = m.layer(bn_id);
    Tensor b({l.out_ch});
    for (int o = 0; o < l.out_ch; ++o) {
        const double s = bn.gamma.value[o] * (1.0 / std::sqrt(bn.run_var[o] + bn.eps));
        b[o] = bn.beta.value[o] - bn.run_mean[o] * s;
    }
    return b;
}

namespace {

double percentile_abs(std::vector<double>& vals, double pct) {
    if (vals.empty()) return 0.0;
    for (auto& v : vals) v = std::abs(v);
    const auto n = static_cast<int64_t>(vals.size());
    // nearest-rank
    int64_t rank = static_cast<int64_t>(std::ceil(pct / 100.0 * double(n)));
    rank = std::clamp<int64_t>(rank, 1, n);
    std::nth_element(vals.begin(), vals.begin() + (rank - 1), vals.end());
    return vals[static_cast<size_t>(rank - 1)];
}

}  // namespace

void init_weight_steps(ModelGraph& m, const MacroConfig& macro) {
    const ClipBounds b = clip_bounds(macro.weight_bits);
    for (int cid : m.conv_ids()) {
        Layer& l = m.layer(cid);
        if (l.wq.enabled) continue;
        const Tensor w = folded_conv_weights(m, cid);
        double mean = 0.0;
        for (int64_t i = 0; i < w.numel(); ++i) mean += std::abs(w[i]);
        mean /= double(std::max<int64_t>(w.numel(), 1));
        const double s = std::max(2.0 * mean / std::sqrt(double(b.q_p)), 1e-8);
        l.wq.step = Param(Tensor::scalar(s));
        l.wq.enabled = true;
    }
}

double phase1_train(ModelGraph& m, const Dataset& data, const QatConfig& cfg,
                    const MacroConfig& macro, std::mt19937_64& rng) {
    init_weight_steps(m, macro);
    if (cfg.phase1_epochs == 0) return 0.0;
    set_stage_trainability(m, Stage::Phase1);
    TrainConfig tc;
    tc.epochs = cfg.phase1_epochs;
    tc.batch = cfg.batch;
    tc.lr = cfg.phase1_lr;
    tc.macro = &macro;
    return train(m, data, tc, ForwardMode::Phase1Train, rng);
}

void calibrate_adc_step(ModelGraph& m, const Dataset& calib, const QatConfig& cfg,
                        const MacroConfig& macro) {
    if (calib.size() == 0) throw std::runtime_error("calibrate_adc_step: empty calibration set");
    const size_t n_img = std::min<size_t>(calib.size(), static_cast<size_t>(cfg.calib_images));
    std::vector<size_t> idx(n_img);
    for (size_t i = 0; i < n_img; ++i) idx[i] = i;
    Batch b = make_batch(calib, idx);

    std::vector<Tensor> values;
    ForwardOptions fwd;
    fwd.mode = ForwardMode::Phase1Eval;
    fwd.macro = &macro;
    fwd.layer_values = &values;
    forward_model(m, b.x, nullptr, fwd);

    const ClipBounds wb = clip_bounds(macro.weight_bits);
    const ClipBounds ab = clip_bounds(macro.adc_bits);
    for (int cid : m.conv_ids()) {
        Layer& l = m.layer(cid);
        const Tensor& x = l.inputs.empty() ? b.x : values[static_cast<size_t>(l.inputs[0])];
        const double s_a = input_act_step(m, cid);
        const Tensor qw = quantize_weights(folded_conv_weights(m, cid), l.wq.step.value[0], wb).codes;

        const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
        const int k = l.k;
        const int Ho = conv_out_dim(H, k, l.stride, l.pad);
        const int Wo = conv_out_dim(W, k, l.stride, l.pad);
        const int hw = Ho * Wo;
        Tensor qa(x.shape);
        for (int64_t i = 0; i < x.numel(); ++i) qa[i] = round_half_away(x[i] / s_a);

        const auto seg_ch = split_channels(Ci, channels_per_bitline(macro, k));
        std::vector<double> col(static_cast<size_t>(Ci) * k * k * hw);
        std::vector<double> psum(static_cast<size_t>(l.out_ch) * hw);
        std::vector<double> pre_adc;
        pre_adc.reserve(static_cast<size_t>(N) * seg_ch.size() * l.out_ch * hw);
        for (int img = 0; img < N; ++img) {
            im2col(qa.v.data() + static_cast<int64_t>(img) * Ci * H * W, Ci, H, W, k, l.stride,
                   l.pad, col.data());
            int c0 = 0;
            for (int nc : seg_ch) {
                std::fill(psum.begin(), psum.end(), 0.0);
                for (int co = 0; co < l.out_ch; ++co)
                    gemm_acc(1, hw, nc * k * k,
                             qw.v.data() + (static_cast<int64_t>(co) * Ci + c0) * k * k,
                             col.data() + static_cast<int64_t>(c0) * k * k * hw,
                             psum.data() + static_cast<int64_t>(co) * hw);
                for (double p : psum) pre_adc.push_back(p * s_a);
                c0 += nc;
            }
        }
        const double q = percentile_abs(pre_adc, cfg.calib_percentile);
        l.pq.step = std::max(q / double(ab.q_p), 1e-8);
        l.pq.enabled = true;
    }
}

double phase2_train(ModelGraph& m, const Dataset& data, const QatConfig& cfg,
                    const MacroConfig& macro, std::mt19937_64& rng) {
    for (int cid : m.conv_ids()) {
        if (!m.layer(cid).wq.enabled)
            throw std::runtime_error("phase-2 requires phase-1 weight steps; run qat-phase1 first");
        if (!m.layer(cid).pq.enabled)
            throw std::runtime_error("phase-2 requires calibrated ADC steps on conv " +
                                     std::to_string(cid));
    }
    if (cfg.phase2_epochs == 0) return 0.0;
    set_stage_trainability(m, Stage::Phase2);
    TrainConfig tc;
    tc.epochs = cfg.phase2_epochs;
    tc.batch = cfg.batch;
    tc.lr = cfg.phase2_lr;
    tc.macro = &macro;
    return train(m, data, tc, ForwardMode::Phase2Train, rng);
}

}  // namespace cim

#include "cim/sim.hpp"

#include <cmath>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>

#include "cim/ops.hpp"
#include "cim/rounding.hpp"

namespace cim {

nlohmann::json SimTrace::to_json() const {
    nlohmann::json j;
    j["conversions"] = conversions;
    j["cycles"] = cycles;
    j["clip_events"] = clip_events;
    j["max_pre_adc"] = max_pre_adc;
    j["layers"] = nlohmann::json::array();
    for (const SimLayerTrace& l : layers)
        j["layers"].push_back({{"layer", l.layer_id},
                               {"conversions", l.conversions},
                               {"cycles", l.cycles},
                               {"clip_events", l.clip_events},
                               {"max_pre_adc", l.max_pre_adc}});
    return j;
}

Tensor dac_quantize_input(const Tensor& x, double s_a, int dac_bits) {
    if (s_a <= 0.0) throw std::runtime_error("dac_quantize_input: step size must be positive");
    const double qmax = double((1 << dac_bits) - 1);
    Tensor q(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i)
        q[i] = round_half_away(clip(x[i] / s_a, 0.0, qmax));
    return q;
}

namespace {

// Integer MAC + ADC for one conv layer; x carries dequantized activations.
// Value arithmetic mirrors the training graph expression-for-expression so
// codes and outputs agree bit-exactly.
Tensor simulate_conv(const IntLayer& l, const MacroConfig& macro, const Tensor& x,
                     SimLayerTrace* tr, std::vector<double>* code_sink) {
    const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (Ci != l.in_ch)
        throw std::runtime_error("simulate: channel mismatch, input " + std::to_string(Ci) +
                                 " vs layer " + std::to_string(l.in_ch));
    const int Co = l.out_ch, k = l.k;
    const int Ho = conv_out_dim(H, k, l.stride, l.pad);
    const int Wo = conv_out_dim(W, k, l.stride, l.pad);
    const int hw = Ho * Wo;
    const ClipBounds ab = clip_bounds(macro.adc_bits);
    const double qn = ab.q_n, qp = ab.q_p;
    const double r = l.s_a / l.s_adc;
    const int64_t acc_limit = int64_t(macro.wordlines) * clip_bounds(macro.weight_bits).q_p *
                              ((1 << macro.dac_bits) - 1);

    Tensor qa(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) qa[i] = round_half_away(x[i] / l.s_a);

    std::vector<double> col(static_cast<size_t>(Ci) * k * k * hw);
    std::vector<int32_t> icol(col.size());
    std::vector<int64_t> psum(static_cast<size_t>(Co) * hw);

    Tensor out({N, Co, Ho, Wo});
    for (int img = 0; img < N; ++img) {
        double* o = out.v.data() + static_cast<int64_t>(img) * Co * hw;
        im2col(qa.v.data() + static_cast<int64_t>(img) * Ci * H * W, Ci, H, W, k, l.stride,
               l.pad, col.data());
        for (size_t i = 0; i < col.size(); ++i) icol[i] = static_cast<int32_t>(col[i]);
        int c0 = 0;
        for (int nc : l.seg_channels) {
            std::fill(psum.begin(), psum.end(), 0);
            for (int co = 0; co < Co; ++co) {
                const int8_t* wrow = l.qw.data() + (static_cast<int64_t>(co) * Ci + c0) * k * k;
                int64_t* pr = psum.data() + static_cast<int64_t>(co) * hw;
                for (int row = 0; row < nc * k * k; ++row) {
                    const int64_t wv = wrow[row];
                    if (wv == 0) continue;
                    const int32_t* cr = icol.data() + (static_cast<int64_t>(c0) * k * k + row) * hw;
                    for (int p = 0; p < hw; ++p) pr[p] += wv * cr[p];
                }
            }
            for (int64_t i = 0; i < static_cast<int64_t>(Co) * hw; ++i) {
                const int64_t p = psum[i];
                if (p > acc_limit || p < -acc_limit)
                    throw std::runtime_error("simulate: integer accumulator overflow");
                const double pre = double(p);
                const double scaled = pre * r;
                const bool in = (scaled >= -qn && scaled <= qp);
                if (!in) ++tr->clip_events;
                const double mag = std::abs(pre * l.s_a);
                if (mag > tr->max_pre_adc) tr->max_pre_adc = mag;
                const double code = round_half_away(clip(scaled, -qn, qp));
                if (code_sink) code_sink->push_back(code);
                o[i] += code;
                ++tr->conversions;
            }
            c0 += nc;
        }
        for (int64_t i = 0; i < static_cast<int64_t>(Co) * hw; ++i) o[i] *= l.scale;
        for (int co = 0; co < Co; ++co)
            for (int p = 0; p < hw; ++p)
                o[static_cast<int64_t>(co) * hw + p] += l.bias[static_cast<size_t>(co)];
        tr->cycles += l.cycles;
    }
    return out;
}

}  // namespace

SimResult simulate_inference(const IntegerModel& im, const Tensor& x,
                             std::map<int, std::vector<double>>* code_sink) {
    if (x.shape.size() != 4 || x.dim(1) != im.input_channels || x.dim(2) != im.input_size ||
        x.dim(3) != im.input_size)
        throw std::runtime_error("simulate: input shape " + x.shape_str() +
                                 " does not match model input");
    const int N = x.dim(0);
    SimResult res;
    std::vector<Tensor> out(im.layers.size());
    auto in_val = [&](const IntLayer& l, int which = 0) -> const Tensor& {
        return l.inputs.empty() ? x : out[static_cast<size_t>(l.inputs[which])];
    };

    for (size_t id = 0; id < im.layers.size(); ++id) {
        const IntLayer& l = im.layers[id];
        switch (l.kind) {
            case LayerKind::ActQuant: {
                const Tensor& xin = in_val(l);
                const double qmax = double((1 << l.aq_bits) - 1);
                Tensor r(xin.shape);
                for (int64_t i = 0; i < xin.numel(); ++i) {
                    const double z = xin[i] / l.aq_step;
                    r[i] = round_half_away(clip(z, 0.0, qmax)) * l.aq_step;
                }
                out[id] = std::move(r);
                break;
            }
            case LayerKind::Conv: {
                SimLayerTrace tr;
                tr.layer_id = static_cast<int>(id);
                std::vector<double>* sink = nullptr;
                if (code_sink) sink = &(*code_sink)[static_cast<int>(id)];
                out[id] = simulate_conv(l, im.macro, in_val(l), &tr, sink);
                res.trace.layers.push_back(tr);
                break;
            }
            case LayerKind::BatchNorm:
                out[id] = in_val(l);  // folded into the conv at export
                break;
            case LayerKind::ReLU: {
                Tensor r = in_val(l);
                for (auto& v : r.v) v = v > 0.0 ? v : 0.0;
                out[id] = std::move(r);
                break;
            }
            case LayerKind::MaxPool: {
                const Tensor& xin = in_val(l);
                const int C = xin.dim(1), H = xin.dim(2), W = xin.dim(3);
                const int Ho = (H - l.pk) / l.ps + 1, Wo = (W - l.pk) / l.ps + 1;
                Tensor r({N, C, Ho, Wo});
                int64_t o = 0;
                for (int img = 0; img < N; ++img)
                    for (int c = 0; c < C; ++c) {
                        const double* plane =
                            xin.v.data() + (static_cast<int64_t>(img) * C + c) * H * W;
                        for (int oi = 0; oi < Ho; ++oi)
                            for (int oj = 0; oj < Wo; ++oj, ++o) {
                                double best = -1e300;
                                for (int ki = 0; ki < l.pk; ++ki)
                                    for (int kj = 0; kj < l.pk; ++kj) {
                                        const double v =
                                            plane[static_cast<int64_t>(oi * l.ps + ki) * W +
                                                  (oj * l.ps + kj)];
                                        if (v > best) best = v;
                                    }
                                r[o] = best;
                            }
                    }
                out[id] = std::move(r);
                break;
            }
            case LayerKind::AvgPool: {
                const Tensor& xin = in_val(l);
                const int C = xin.dim(1), hw = xin.dim(2) * xin.dim(3);
                Tensor r({N, C});
                for (int64_t i = 0; i < static_cast<int64_t>(N) * C; ++i) {
                    double s = 0.0;
                    for (int p = 0; p < hw; ++p) s += xin[i * hw + p];
                    r[i] = s / hw;
                }
                out[id] = std::move(r);
                break;
            }
            case LayerKind::Flatten: {
                const Tensor& xin = in_val(l);
                out[id] = Tensor({N, static_cast<int>(xin.numel() / N)}, xin.v);
                break;
            }
            case LayerKind::Linear: {
                const Tensor& xin = in_val(l);
                const int F = l.in_features, O = l.out_features;
                if (xin.dim(1) != F)
                    throw std::runtime_error("simulate: linear input width " +
                                             std::to_string(xin.dim(1)) + " vs expected " +
                                             std::to_string(F));
                Tensor r({N, O});
                for (int img = 0; img < N; ++img)
                    for (int oidx = 0; oidx < O; ++oidx) {
                        double acc = 0.0;
                        const double* xv = xin.v.data() + static_cast<int64_t>(img) * F;
                        const double* wv = l.lw.data() + static_cast<int64_t>(oidx) * F;
                        for (int f = 0; f < F; ++f) acc += xv[f] * wv[f];
                        r[static_cast<int64_t>(img) * O + oidx] =
                            acc + l.lb[static_cast<size_t>(oidx)];
                    }
                out[id] = std::move(r);
                break;
            }
            case LayerKind::ResidualAdd: {
                Tensor r = in_val(l, 0);
                const Tensor& b = in_val(l, 1);
                for (int64_t i = 0; i < r.numel(); ++i) r[i] += b[i];
                out[id] = std::move(r);
                break;
            }
        }
    }

    for (const SimLayerTrace& l : res.trace.layers) {
        res.trace.conversions += l.conversions;
        res.trace.cycles += l.cycles;
        res.trace.clip_events += l.clip_events;
        if (l.max_pre_adc > res.trace.max_pre_adc) res.trace.max_pre_adc = l.max_pre_adc;
    }
    res.logits = out.back();
    return res;
}

}  // namespace cim

#include "cim/quant.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "cim/ops.hpp"
#include "cim/rounding.hpp"

namespace cim {

QuantizedWeights quantize_weights(const Tensor& w, double s, const ClipBounds& b) {
    if (s <= 0.0) throw std::runtime_error("quantize_weights: step size must be positive");
    QuantizedWeights out{Tensor(w.shape), Tensor(w.shape)};
    for (int64_t i = 0; i < w.numel(); ++i) {
        const double q = round_half_away(clip(w[i] / s, -double(b.q_n), double(b.q_p)));
        out.codes[i] = q;
        out.dequant[i] = q * s;
    }
    return out;
}

NodeP weight_fakequant(NodeP w, NodeP step, ClipBounds bounds) {
    const double s = step->value[0];
    if (s <= 0.0) throw std::runtime_error("weight_fakequant: step size must be positive");
    const double qn = bounds.q_n, qp = bounds.q_p;
    const int64_t n_el = w->value.numel();

    auto n = std::make_shared<Node>();
    n->value = Tensor(w->value.shape);
    n->parents = {w, step};
    n->requires_grad = w->requires_grad || step->requires_grad;

    auto mask = std::make_shared<std::vector<uint8_t>>(n_el);
    auto dvds = std::make_shared<std::vector<double>>(n_el);
    for (int64_t i = 0; i < n_el; ++i) {
        const double z = w->value[i] / s;
        const bool in = (z >= -qn && z <= qp);
        (*mask)[i] = in;
        const double q = round_half_away(clip(z, -qn, qp));
        n->value[i] = q * s;
        (*dvds)[i] = in ? (q - z) : (z < -qn ? -qn : qp);
    }
    const double gscale = 1.0 / std::sqrt(double(n_el) * qp);

    n->backward_fn = [mask, dvds, gscale, n_el](Node& self) {
        NodeP wn = self.parents[0], sn = self.parents[1];
        if (wn->requires_grad) {
            wn->ensure_grad();
            for (int64_t i = 0; i < n_el; ++i)
                if ((*mask)[i]) wn->grad[i] += self.grad[i];
        }
        if (sn->requires_grad) {
            sn->ensure_grad();
            double acc = 0.0;
            for (int64_t i = 0; i < n_el; ++i) acc += self.grad[i] * (*dvds)[i];
            sn->grad[0] += acc * gscale;
        }
    };
    return n;
}

NodeP act_fakequant(NodeP x, NodeP step, int bits) {
    const double s = step->value[0];
    if (s <= 0.0) throw std::runtime_error("act_fakequant: step size must be positive");
    const double qmax = double((1 << bits) - 1);
    const int64_t n_el = x->value.numel();

    auto n = std::make_shared<Node>();
    n->value = Tensor(x->value.shape);
    n->parents = {x, step};
    n->requires_grad = x->requires_grad || step->requires_grad;

    auto mask = std::make_shared<std::vector<uint8_t>>(n_el);
    auto dvds = std::make_shared<std::vector<double>>(n_el);
    for (int64_t i = 0; i < n_el; ++i) {
        const double z = x->value[i] / s;
        const bool in = (z >= 0.0 && z <= qmax);
        (*mask)[i] = in;
        const double q = round_half_away(clip(z, 0.0, qmax));
        n->value[i] = q * s;
        (*dvds)[i] = in ? (q - z) : (z < 0.0 ? 0.0 : qmax);
    }
    const double gscale = 1.0 / std::sqrt(double(n_el) * qmax);

    n->backward_fn = [mask, dvds, gscale, n_el](Node& self) {
        NodeP xn = self.parents[0], sn = self.parents[1];
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (int64_t i = 0; i < n_el; ++i)
                if ((*mask)[i]) xn->grad[i] += self.grad[i];
        }
        if (sn->requires_grad) {
            sn->ensure_grad();
            double acc = 0.0;
            for (int64_t i = 0; i < n_el; ++i) acc += self.grad[i] * (*dvds)[i];
            sn->grad[0] += acc * gscale;
        }
    };
    return n;
}

std::vector<int> split_channels(int c_in, int channels_per_bl) {
    std::vector<int> segs;
    int left = c_in;
    while (left > channels_per_bl) {
        segs.push_back(channels_per_bl);
        left -= channels_per_bl;
    }
    segs.push_back(left);
    return segs;
}

NodeP segmented_qconv(NodeP x, NodeP w, NodeP bias, const SegmentedConvSpec& spec,
                      std::vector<double>* code_sink) {
    if (spec.s_w <= 0.0 || spec.s_a <= 0.0 || spec.s_adc <= 0.0)
        throw std::runtime_error("segmented_qconv: step sizes must be positive");
    const int N = x->value.dim(0), Ci = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const int Co = w->value.dim(0), k = w->value.dim(2);
    if (w->value.dim(1) != Ci)
        throw std::runtime_error("segmented_qconv: segmentation/channel mismatch: input " +
                                 std::to_string(Ci) + " vs weight " + w->value.shape_str());
    const int Ho = conv_out_dim(H, k, spec.stride, spec.pad);
    const int Wo = conv_out_dim(W, k, spec.stride, spec.pad);
    const int hw = Ho * Wo;
    const auto seg_ch = split_channels(Ci, spec.channels_per_bl);
    const int n_seg = static_cast<int>(seg_ch.size());
    const double r = spec.s_a / spec.s_adc;  // integer-domain ADC divisor, inverted
    const double out_scale = spec.s_w * spec.s_adc;
    const double qn_adc = spec.adc_bounds.q_n, qp_adc = spec.adc_bounds.q_p;

    // Quantize weights once: Qw = round(clip(W'/S_W)); STE mask kept for backward.
    const int64_t wn_el = w->value.numel();
    auto w_mask = std::make_shared<std::vector<uint8_t>>(wn_el);
    Tensor qw(w->value.shape);
    for (int64_t i = 0; i < wn_el; ++i) {
        const double z = w->value[i] / spec.s_w;
        (*w_mask)[i] = (z >= -double(spec.w_bounds.q_n) && z <= double(spec.w_bounds.q_p));
        qw[i] = round_half_away(clip(z, -double(spec.w_bounds.q_n), double(spec.w_bounds.q_p)));
    }

    // Integer activation codes recovered from the dequantized input.
    Tensor qa(x->value.shape);
    for (int64_t i = 0; i < qa.numel(); ++i) qa[i] = round_half_away(x->value[i] / spec.s_a);

    auto n = std::make_shared<Node>();
    n->value = Tensor({N, Co, Ho, Wo});
    n->parents = {x, w};
    if (bias) n->parents.push_back(bias);
    n->requires_grad = x->requires_grad || w->requires_grad || (bias && bias->requires_grad);

    // per-segment in-range masks for the ADC clip, [n_seg][N*Co*hw]
    auto adc_mask = std::make_shared<std::vector<std::vector<uint8_t>>>(
        n_seg, std::vector<uint8_t>(static_cast<size_t>(N) * Co * hw));
    auto seg_first = std::make_shared<std::vector<int>>();  // first channel of each segment
    {
        int c0 = 0;
        for (int g = 0; g < n_seg; ++g) { seg_first->push_back(c0); c0 += seg_ch[g]; }
    }

    std::vector<double> col(static_cast<size_t>(Ci) * k * k * hw);
    std::vector<double> psum(static_cast<size_t>(Co) * hw);
    for (int img = 0; img < N; ++img) {
        double* out = n->value.v.data() + static_cast<int64_t>(img) * Co * hw;
        im2col(qa.v.data() + static_cast<int64_t>(img) * Ci * H * W, Ci, H, W, k, spec.stride,
               spec.pad, col.data());
        for (int g = 0; g < n_seg; ++g) {
            const int c0 = (*seg_first)[g], nc = seg_ch[g];
            std::fill(psum.begin(), psum.end(), 0.0);
            // Qw rows restricted to this segment's channel slice
            for (int co = 0; co < Co; ++co)
                gemm_acc(1, hw, nc * k * k,
                         qw.v.data() + (static_cast<int64_t>(co) * Ci + c0) * k * k,
                         col.data() + static_cast<int64_t>(c0) * k * k * hw,
                         psum.data() + static_cast<int64_t>(co) * hw);
            for (int64_t i = 0; i < static_cast<int64_t>(Co) * hw; ++i) {
                const double scaled = psum[i] * r;
                const bool in = (scaled >= -qn_adc && scaled <= qp_adc);
                (*adc_mask)[g][static_cast<size_t>(img) * Co * hw + i] = in;
                const double code = round_half_away(clip(scaled, -qn_adc, qp_adc));
                if (code_sink) code_sink->push_back(code);
                out[i] += code;
            }
        }
        for (int64_t i = 0; i < static_cast<int64_t>(Co) * hw; ++i) out[i] *= out_scale;
        if (bias)
            for (int co = 0; co < Co; ++co)
                for (int p = 0; p < hw; ++p)
                    out[static_cast<int64_t>(co) * hw + p] += bias->value[co];
    }

    // Backward: straight-through. Within the ADC clip range the segment sum is
    // treated as the exact conv of x-hat with Qw*S_W; clipped elements get zero.
    auto what = std::make_shared<Tensor>(w->value.shape);
    for (int64_t i = 0; i < wn_el; ++i) (*what)[i] = qw[i] * spec.s_w;
    auto seg_ch_p = std::make_shared<std::vector<int>>(seg_ch);

    const int stride = spec.stride, pad = spec.pad;
    n->backward_fn = [=](Node& self) {
        NodeP xn = self.parents[0], wn = self.parents[1];
        NodeP bn = self.parents.size() > 2 ? self.parents[2] : nullptr;
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn && bn->requires_grad) bn->ensure_grad();
        const int ckk = Ci * k * k;
        std::vector<double> colb(static_cast<size_t>(ckk) * hw);
        std::vector<double> colg(static_cast<size_t>(ckk) * hw);
        std::vector<double> gm(static_cast<size_t>(Co) * hw);
        Tensor gw_hat;  // grad wrt What, mapped through the weight STE mask at the end
        if (wn->requires_grad) gw_hat = Tensor(wn->value.shape);
        for (int img = 0; img < N; ++img) {
            const double* g = self.grad.v.data() + static_cast<int64_t>(img) * Co * hw;
            const double* xv = xn->value.v.data() + static_cast<int64_t>(img) * Ci * H * W;
            if (xn->requires_grad || wn->requires_grad) {
                im2col(xv, Ci, H, W, k, stride, pad, colb.data());
                std::fill(colg.begin(), colg.end(), 0.0);
            }
            for (size_t gseg = 0; gseg < seg_ch_p->size(); ++gseg) {
                const int c0 = (*seg_first)[gseg], nc = (*seg_ch_p)[gseg];
                const uint8_t* m = (*adc_mask)[gseg].data() + static_cast<size_t>(img) * Co * hw;
                for (int64_t i = 0; i < static_cast<int64_t>(Co) * hw; ++i)
                    gm[i] = m[i] ? g[i] : 0.0;
                if (wn->requires_grad)
                    for (int co = 0; co < Co; ++co) {
                        double* gw = gw_hat.v.data() + (static_cast<int64_t>(co) * Ci + c0) * k * k;
                        const double* gmr = gm.data() + static_cast<int64_t>(co) * hw;
                        const double* cb = colb.data() + static_cast<int64_t>(c0) * k * k * hw;
                        for (int row = 0; row < nc * k * k; ++row) {
                            double acc = 0.0;
                            const double* cr = cb + static_cast<int64_t>(row) * hw;
                            for (int p = 0; p < hw; ++p) acc += gmr[p] * cr[p];
                            gw[row] += acc;
                        }
                    }
                if (xn->requires_grad)
                    for (int co = 0; co < Co; ++co) {
                        const double* wv = what->v.data() + (static_cast<int64_t>(co) * Ci + c0) * k * k;
                        const double* gmr = gm.data() + static_cast<int64_t>(co) * hw;
                        double* cg = colg.data() + static_cast<int64_t>(c0) * k * k * hw;
                        for (int row = 0; row < nc * k * k; ++row) {
                            const double wr = wv[row];
                            if (wr == 0.0) continue;
                            double* cr = cg + static_cast<int64_t>(row) * hw;
                            for (int p = 0; p < hw; ++p) cr[p] += wr * gmr[p];
                        }
                    }
            }
            if (xn->requires_grad)
                col2im_acc(colg.data(), Ci, H, W, k, stride, pad,
                           xn->grad.v.data() + static_cast<int64_t>(img) * Ci * H * W);
            if (bn && bn->requires_grad)
                for (int co = 0; co < Co; ++co)
                    for (int p = 0; p < hw; ++p)
                        bn->grad[co] += g[static_cast<int64_t>(co) * hw + p];
        }
        if (wn->requires_grad)
            for (int64_t i = 0; i < wn_el; ++i)
                if ((*w_mask)[i]) wn->grad[i] += gw_hat[i];
    };
    return n;
}

}  // namespace cim

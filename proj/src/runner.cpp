#include "cim/runner.hpp"

#include <cmath>
#include <stdexcept>

#include "cim/ops.hpp"
#include "cim/quant.hpp"

namespace cim {

namespace {

bool is_phase(ForwardMode m) { return m >= ForwardMode::Phase1Train; }
bool is_phase2(ForwardMode m) {
    return m == ForwardMode::Phase2Train || m == ForwardMode::Phase2Eval;
}
bool is_train(ForwardMode m) {
    return m == ForwardMode::FloatTrain || m == ForwardMode::Phase1Train ||
           m == ForwardMode::Phase2Train;
}

}  // namespace

double input_act_step(const ModelGraph& m, int conv_id) {
    int cur = m.layer(conv_id).inputs.empty() ? -1 : m.layer(conv_id).inputs[0];
    while (cur >= 0) {
        const Layer& l = m.layer(cur);
        if (l.kind == LayerKind::ActQuant) return l.aq.step.value[0];
        if (l.kind == LayerKind::MaxPool) {
            cur = l.inputs[0];
            continue;
        }
        break;
    }
    throw std::runtime_error("conv layer " + std::to_string(conv_id) +
                             " has no activation quantizer on its input path");
}

ForwardResult forward_model(ModelGraph& m, const Tensor& x, const std::vector<int>* labels,
                            const ForwardOptions& opts) {
    const bool phase = is_phase(opts.mode);
    const bool training = is_train(opts.mode);
    if (is_phase2(opts.mode) && !opts.macro)
        throw std::runtime_error("phase-2 forward requires a macro config");

    std::vector<NodeP> out(m.layers.size());
    NodeP input = make_const(x);
    auto in_node = [&](const Layer& l, int which = 0) {
        return l.inputs.empty() ? input : out[static_cast<size_t>(l.inputs[which])];
    };

    for (auto& l : m.layers) {
        NodeP r;
        switch (l.kind) {
            case LayerKind::Conv: {
                NodeP xin = in_node(l);
                if (!phase) {
                    r = conv2d(xin, make_leaf(l.weight),
                               l.has_bias ? make_leaf(l.bias) : nullptr, l.stride, l.pad);
                    break;
                }
                // folded weights: W' = W * gamma/sqrt(var+eps), b' = beta - mu*s
                NodeP wf, bf;
                const int bn_id = m.bn_after(l.id);
                if (bn_id >= 0) {
                    Layer& bn = m.layer(bn_id);
                    Tensor c({bn.gamma.value.dim(0)});
                    for (int64_t i = 0; i < c.numel(); ++i)
                        c[i] = 1.0 / std::sqrt(bn.run_var[i] + bn.eps);
                    NodeP s = cmul(make_leaf(bn.gamma), std::move(c));
                    wf = scale_filters(make_leaf(l.weight), s);
                    bf = fold_bias(make_leaf(bn.beta), s, bn.run_mean);
                } else {
                    wf = make_leaf(l.weight);
                    bf = l.has_bias ? make_leaf(l.bias) : make_const(Tensor({l.out_ch}));
                }
                if (!l.wq.enabled)
                    throw std::runtime_error("quantized forward needs an initialized S_W on conv " +
                                             std::to_string(l.id));
                if (!is_phase2(opts.mode)) {
                    NodeP what = weight_fakequant(wf, make_leaf(l.wq.step),
                                                  clip_bounds(opts.macro ? opts.macro->weight_bits : 4));
                    r = conv2d(xin, what, bf, l.stride, l.pad);
                } else {
                    if (!l.pq.enabled)
                        throw std::runtime_error("phase-2 forward needs a calibrated S_ADC on conv " +
                                                 std::to_string(l.id));
                    SegmentedConvSpec spec;
                    spec.s_w = l.wq.step.value[0];
                    spec.s_a = input_act_step(m, l.id);
                    spec.s_adc = l.pq.step;
                    spec.w_bounds = clip_bounds(opts.macro->weight_bits);
                    spec.adc_bounds = clip_bounds(opts.macro->adc_bits);
                    spec.channels_per_bl = channels_per_bitline(*opts.macro, l.k);
                    spec.stride = l.stride;
                    spec.pad = l.pad;
                    std::vector<double>* sink = nullptr;
                    if (opts.code_sink) sink = &(*opts.code_sink)[l.id];
                    r = segmented_qconv(xin, wf, bf, spec, sink);
                }
                break;
            }
            case LayerKind::BatchNorm: {
                const Layer& src = m.layer(l.inputs[0]);
                if (phase && src.kind == LayerKind::Conv) {
                    r = out[static_cast<size_t>(src.id)];  // folded into the conv
                    break;
                }
                if (training)
                    r = batchnorm_train(in_node(l), make_leaf(l.gamma), make_leaf(l.beta),
                                        l.run_mean, l.run_var, l.eps, l.momentum);
                else
                    r = batchnorm_infer(in_node(l), make_leaf(l.gamma), make_leaf(l.beta),
                                        l.run_mean, l.run_var, l.eps);
                break;
            }
            case LayerKind::ReLU: r = relu(in_node(l)); break;
            case LayerKind::MaxPool: r = maxpool2d(in_node(l), l.pk, l.ps); break;
            case LayerKind::AvgPool: r = global_avgpool(in_node(l)); break;
            case LayerKind::Flatten: r = flatten(in_node(l)); break;
            case LayerKind::Linear:
                r = linear(in_node(l), make_leaf(l.weight), make_leaf(l.bias));
                break;
            case LayerKind::ResidualAdd: r = add(in_node(l, 0), in_node(l, 1)); break;
            case LayerKind::ActQuant:
                r = act_fakequant(in_node(l), make_leaf(l.aq.step), l.aq.bits);
                break;
        }
        out[static_cast<size_t>(l.id)] = r;
    }

    if (opts.layer_values) {
        opts.layer_values->clear();
        for (auto& n : out) opts.layer_values->push_back(n->value);
    }

    ForwardResult res;
    res.logits = out[static_cast<size_t>(m.output_id())];
    if (labels) res.loss = cross_entropy(res.logits, *labels);
    return res;
}

void set_stage_trainability(ModelGraph& m, Stage stage) {
    for (auto& l : m.layers) {
        switch (l.kind) {
            case LayerKind::Conv:
                l.weight.trainable = true;
                l.bias.trainable = l.has_bias;
                l.wq.step.trainable = l.wq.enabled && stage == Stage::Phase1;
                break;
            case LayerKind::Linear:
                l.weight.trainable = true;
                l.bias.trainable = true;
                break;
            case LayerKind::BatchNorm:
                l.gamma.trainable = true;
                l.beta.trainable = true;
                break;
            case LayerKind::ActQuant:
                l.aq.step.trainable = (stage == Stage::Seed);
                break;
            default: break;
        }
    }
}

double train(ModelGraph& m, const Dataset& data, const TrainConfig& cfg, ForwardMode mode,
             std::mt19937_64& rng, const std::function<void(int)>& pre_epoch,
             const std::function<void()>& post_backward) {
    auto params = m.all_params();
    AdamConfig adam = cfg.adam;
    adam.lr = cfg.lr;
    ForwardOptions fwd;
    fwd.mode = mode;
    fwd.macro = cfg.macro;

    double last_epoch_loss = 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (pre_epoch) pre_epoch(epoch);
        const auto order = epoch_order(data.size(), rng);
        double loss_sum = 0.0;
        int batches = 0;
        for (size_t i = 0; i < order.size(); i += static_cast<size_t>(cfg.batch)) {
            std::vector<size_t> idx(order.begin() + static_cast<long>(i),
                                    order.begin() +
                                        static_cast<long>(std::min(i + cfg.batch, order.size())));
            Batch b = make_batch(data, idx, cfg.augment, &rng);
            ForwardResult r = forward_model(m, b.x, &b.labels, fwd);
            const double loss = r.loss->value[0];
            if (!std::isfinite(loss))
                throw std::runtime_error("training diverged: loss is not finite at epoch " +
                                         std::to_string(epoch));
            loss_sum += loss;
            ++batches;
            zero_grads(params);
            backward(r.loss);
            if (post_backward) post_backward();
            adam_step(params, adam);
            // learned quantizer steps must stay positive
            for (auto& l : m.layers) {
                if (l.kind == LayerKind::ActQuant && l.aq.step.trainable)
                    for (auto& v : l.aq.step.value.v) v = std::max(v, 1e-8);
                if (l.kind == LayerKind::Conv && l.wq.step.trainable)
                    for (auto& v : l.wq.step.value.v) v = std::max(v, 1e-8);
            }
        }
        last_epoch_loss = loss_sum / std::max(batches, 1);
    }
    return last_epoch_loss;
}

double evaluate(ModelGraph& m, const Dataset& data, ForwardMode mode, const MacroConfig* macro,
                int batch) {
    ForwardOptions fwd;
    fwd.mode = mode;
    fwd.macro = macro;
    int correct = 0;
    for (size_t i = 0; i < data.size(); i += static_cast<size_t>(batch)) {
        std::vector<size_t> idx;
        for (size_t j = i; j < std::min(i + batch, data.size()); ++j) idx.push_back(j);
        Batch b = make_batch(data, idx);
        ForwardResult r = forward_model(m, b.x, nullptr, fwd);
        const int K = r.logits->value.dim(1);
        for (size_t n = 0; n < idx.size(); ++n) {
            const double* row = r.logits->value.v.data() + static_cast<int64_t>(n) * K;
            int best = 0;
            for (int k = 1; k < K; ++k)
                if (row[k] > row[best]) best = k;
            if (best == b.labels[n]) ++correct;
        }
    }
    return 100.0 * correct / double(data.size());
}

}  // namespace cim

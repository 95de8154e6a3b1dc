#include "cim/ir.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "cim/ops.hpp"

namespace cim {

using nlohmann::json;

const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::BatchNorm: return "batchnorm";
        case LayerKind::ReLU: return "relu";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::AvgPool: return "avgpool";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::Linear: return "linear";
        case LayerKind::ResidualAdd: return "residual-add";
        case LayerKind::ActQuant: return "act-quant";
    }
    return "?";
}

LayerKind kind_from_name(const std::string& s) {
    for (LayerKind k : {LayerKind::Conv, LayerKind::BatchNorm, LayerKind::ReLU, LayerKind::MaxPool,
                        LayerKind::AvgPool, LayerKind::Flatten, LayerKind::Linear,
                        LayerKind::ResidualAdd, LayerKind::ActQuant})
        if (s == kind_name(k)) return k;
    throw std::runtime_error("unknown layer kind: " + s);
}

std::vector<Param*> ModelGraph::all_params() {
    std::vector<Param*> out;
    for (auto& l : layers) {
        switch (l.kind) {
            case LayerKind::Conv:
                out.push_back(&l.weight);
                if (l.has_bias) out.push_back(&l.bias);
                if (l.wq.enabled) out.push_back(&l.wq.step);
                break;
            case LayerKind::Linear:
                out.push_back(&l.weight);
                out.push_back(&l.bias);
                break;
            case LayerKind::BatchNorm:
                out.push_back(&l.gamma);
                out.push_back(&l.beta);
                break;
            case LayerKind::ActQuant:
                out.push_back(&l.aq.step);
                break;
            default: break;
        }
    }
    return out;
}

std::vector<int> ModelGraph::conv_ids() const {
    std::vector<int> out;
    for (auto& l : layers)
        if (l.kind == LayerKind::Conv) out.push_back(l.id);
    return out;
}

int ModelGraph::bn_after(int conv_id) const {
    for (auto& l : layers)
        if (l.kind == LayerKind::BatchNorm && l.inputs.size() == 1 && l.inputs[0] == conv_id)
            return l.id;
    return -1;
}

std::vector<TensorShape> ModelGraph::infer_shapes() const {
    std::vector<TensorShape> shapes(layers.size() + 1);
    const TensorShape input{input_channels, input_size, input_size, false};
    shapes[layers.size()] = input;
    auto in_shape = [&](const Layer& l, int which = 0) -> const TensorShape& {
        return l.inputs.empty() ? input : shapes[static_cast<size_t>(l.inputs[which])];
    };
    for (auto& l : layers) {
        const TensorShape& s = in_shape(l);
        TensorShape& o = shapes[static_cast<size_t>(l.id)];
        switch (l.kind) {
            case LayerKind::Conv:
                if (s.c != l.in_ch)
                    throw std::runtime_error("conv layer " + std::to_string(l.id) +
                                             ": input channels mismatch");
                o = {l.out_ch, conv_out_dim(s.h, l.k, l.stride, l.pad),
                     conv_out_dim(s.w, l.k, l.stride, l.pad), false};
                break;
            case LayerKind::BatchNorm:
            case LayerKind::ReLU:
            case LayerKind::ActQuant:
                o = s;
                break;
            case LayerKind::MaxPool:
                o = {s.c, (s.h - l.pk) / l.ps + 1, (s.w - l.pk) / l.ps + 1, false};
                break;
            case LayerKind::AvgPool:
                o = {s.c, 0, 0, true};
                break;
            case LayerKind::Flatten:
                o = {s.c * s.h * s.w, 0, 0, true};
                break;
            case LayerKind::Linear:
                if (s.features() != l.in_features)
                    throw std::runtime_error("linear layer " + std::to_string(l.id) +
                                             ": expected " + std::to_string(l.in_features) +
                                             " features, got " + std::to_string(s.features()));
                o = {l.out_features, 0, 0, true};
                break;
            case LayerKind::ResidualAdd: {
                const TensorShape& b = in_shape(l, 1);
                if (s.c != b.c || s.h != b.h || s.w != b.w)
                    throw std::runtime_error("residual-add layer " + std::to_string(l.id) +
                                             ": operand shapes differ");
                o = s;
                break;
            }
        }
    }
    return shapes;
}

void ModelGraph::validate() const {
    for (auto& l : layers) {
        for (int in : l.inputs)
            if (in < 0 || in >= l.id)
                throw std::runtime_error("layer inputs must reference earlier layers");
        if (l.kind == LayerKind::Conv && (l.in_ch < 1 || l.out_ch < 1))
            throw std::runtime_error("conv channel counts must be >= 1");
        if (l.kind == LayerKind::ResidualAdd && l.inputs.size() != 2)
            throw std::runtime_error("residual-add needs two producers");
    }
    infer_shapes();  // throws on shape inconsistencies
}

// --- channel grouping ---

namespace {
struct UnionFind {
    std::vector<int> p;
    int make() {
        p.push_back(static_cast<int>(p.size()));
        return p.back();
    }
    int find(int x) {
        while (p[static_cast<size_t>(x)] != x) x = p[static_cast<size_t>(x)] = p[static_cast<size_t>(p[static_cast<size_t>(x)])];
        return x;
    }
    void unite(int a, int b) { p[static_cast<size_t>(find(a))] = find(b); }
};
}  // namespace

ChannelGroups analyze_channels(const ModelGraph& m) {
    UnionFind uf;
    uf.make();  // group 0 = model input channels
    std::vector<int> raw(m.layers.size(), -1);
    auto in_group = [&](const Layer& l, int which = 0) {
        return l.inputs.empty() ? 0 : raw[static_cast<size_t>(l.inputs[which])];
    };
    for (auto& l : m.layers) {
        switch (l.kind) {
            case LayerKind::Conv: raw[static_cast<size_t>(l.id)] = uf.make(); break;
            case LayerKind::BatchNorm:
            case LayerKind::ReLU:
            case LayerKind::ActQuant:
            case LayerKind::MaxPool:
            case LayerKind::AvgPool:
            case LayerKind::Flatten:
                raw[static_cast<size_t>(l.id)] = in_group(l);
                break;
            case LayerKind::ResidualAdd:
                uf.unite(in_group(l, 0), in_group(l, 1));
                raw[static_cast<size_t>(l.id)] = uf.find(in_group(l, 0));
                break;
            case LayerKind::Linear: raw[static_cast<size_t>(l.id)] = -1; break;
        }
    }
    // compact root ids
    std::map<int, int> root_to_idx;
    root_to_idx[0] = 0;
    ChannelGroups cg;
    cg.groups.resize(1);
    cg.group_of.assign(m.layers.size(), -1);
    auto idx_of = [&](int g) {
        const int r = uf.find(g);
        auto it = root_to_idx.find(r);
        if (it != root_to_idx.end()) return it->second;
        const int idx = static_cast<int>(cg.groups.size());
        cg.groups.emplace_back();
        root_to_idx[r] = idx;
        return idx;
    };
    const auto shapes = m.infer_shapes();
    cg.groups[0].channels = m.input_channels;
    for (auto& l : m.layers) {
        if (raw[static_cast<size_t>(l.id)] >= 0) {
            const int g = idx_of(raw[static_cast<size_t>(l.id)]);
            cg.group_of[static_cast<size_t>(l.id)] = g;
            // Flatten leaves the channel space; it stays in the group only so
            // downstream linear layers can be found, and must not overwrite the
            // group's channel count with its flattened feature count.
            if (l.kind != LayerKind::Flatten)
                cg.groups[static_cast<size_t>(g)].channels = shapes[static_cast<size_t>(l.id)].c;
            if (l.kind == LayerKind::Conv) cg.groups[static_cast<size_t>(g)].conv_producers.push_back(l.id);
            if (l.kind == LayerKind::BatchNorm) cg.groups[static_cast<size_t>(g)].bn_members.push_back(l.id);
        }
        const int ing = l.inputs.empty() ? 0 : raw[static_cast<size_t>(l.inputs[0])];
        if (l.kind == LayerKind::Conv)
            cg.groups[static_cast<size_t>(idx_of(ing))].conv_consumers.push_back(l.id);
        if (l.kind == LayerKind::Linear)
            cg.groups[static_cast<size_t>(idx_of(ing))].linear_consumers.push_back(l.id);
    }
    return cg;
}

// --- builders ---

namespace {

int add_layer(ModelGraph& m, Layer l) {
    l.id = static_cast<int>(m.layers.size());
    m.layers.push_back(std::move(l));
    return m.layers.back().id;
}

int add_conv(ModelGraph& m, int from, int c_in, int c_out, int k, int stride = 1, int pad = -1) {
    Layer l;
    l.kind = LayerKind::Conv;
    if (from >= 0) l.inputs = {from};
    l.in_ch = c_in;
    l.out_ch = c_out;
    l.k = k;
    l.stride = stride;
    l.pad = pad < 0 ? k / 2 : pad;
    l.weight = Param(Tensor({c_out, c_in, k, k}));
    l.bias = Param(Tensor({c_out}));
    return add_layer(m, std::move(l));
}

int add_bn(ModelGraph& m, int from, int c) {
    Layer l;
    l.kind = LayerKind::BatchNorm;
    l.inputs = {from};
    l.gamma = Param(Tensor::full({c}, 1.0));
    l.beta = Param(Tensor({c}));
    l.run_mean = Tensor({c});
    l.run_var = Tensor::full({c}, 1.0);
    return add_layer(m, std::move(l));
}

int add_simple(ModelGraph& m, int from, LayerKind k) {
    Layer l;
    l.kind = k;
    if (from >= 0) l.inputs = {from};
    return add_layer(m, std::move(l));
}

int add_actq(ModelGraph& m, int from, int bits = 4) {
    Layer l;
    l.kind = LayerKind::ActQuant;
    if (from >= 0) l.inputs = {from};
    l.aq.bits = bits;
    l.aq.step = Param(Tensor::scalar(1.0 / double((1 << bits) - 1)));
    return add_layer(m, std::move(l));
}

int add_linear(ModelGraph& m, int from, int in_f, int out_f) {
    Layer l;
    l.kind = LayerKind::Linear;
    l.inputs = {from};
    l.in_features = in_f;
    l.out_features = out_f;
    l.weight = Param(Tensor({out_f, in_f}));
    l.bias = Param(Tensor({out_f}));
    return add_layer(m, std::move(l));
}

int conv_bn_relu_q(ModelGraph& m, int from, int c_in, int c_out, int k = 3, int stride = 1) {
    int id = add_conv(m, from, c_in, c_out, k, stride);
    id = add_bn(m, id, c_out);
    id = add_simple(m, id, LayerKind::ReLU);
    return add_actq(m, id);
}

}  // namespace

ModelGraph build_toy_cnn(int num_classes, int input_size, int input_channels) {
    ModelGraph m;
    m.arch = "toy-cnn";
    m.input_channels = input_channels;
    m.input_size = input_size;
    m.num_classes = num_classes;
    int id = add_actq(m, -1);
    id = conv_bn_relu_q(m, id, input_channels, 16);
    id = conv_bn_relu_q(m, id, 16, 32);
    id = add_simple(m, id, LayerKind::MaxPool);
    id = conv_bn_relu_q(m, id, 32, 64);
    id = conv_bn_relu_q(m, id, 64, 64);
    id = add_simple(m, id, LayerKind::MaxPool);
    id = add_simple(m, id, LayerKind::Flatten);
    const int s = input_size / 4;
    add_linear(m, id, 64 * s * s, num_classes);
    m.validate();
    return m;
}

static ModelGraph build_vgg(const std::string& name, const std::vector<int>& convs_per_block,
                            const std::vector<int>& widths, int num_classes, int input_size) {
    size_t total = 0;
    for (int b : convs_per_block) total += static_cast<size_t>(b);
    if (widths.size() != total)
        throw std::runtime_error(name + " expects " + std::to_string(total) + " conv widths");
    ModelGraph m;
    m.arch = name;
    m.input_size = input_size;
    m.num_classes = num_classes;
    int id = add_actq(m, -1);
    int c = m.input_channels;
    size_t wi = 0;
    int spatial = input_size;
    for (int b : convs_per_block) {
        for (int i = 0; i < b; ++i) {
            id = conv_bn_relu_q(m, id, c, widths[wi]);
            c = widths[wi++];
        }
        id = add_simple(m, id, LayerKind::MaxPool);
        spatial /= 2;
    }
    id = add_simple(m, id, LayerKind::Flatten);
    add_linear(m, id, c * spatial * spatial, num_classes);
    m.validate();
    return m;
}

ModelGraph build_vgg9(const std::vector<int>& widths, int num_classes, int input_size) {
    return build_vgg("vgg9", {2, 2, 2, 2}, widths, num_classes, input_size);
}

ModelGraph build_vgg16(const std::vector<int>& widths, int num_classes, int input_size) {
    return build_vgg("vgg16", {2, 2, 3, 3, 3}, widths, num_classes, input_size);
}

ModelGraph build_resnet18(const std::vector<int>& stage_widths, int num_classes, int input_size) {
    if (stage_widths.size() != 4)
        throw std::runtime_error("resnet18 expects 4 stage widths");
    ModelGraph m;
    m.arch = "resnet18";
    m.input_size = input_size;
    m.num_classes = num_classes;
    int id = add_actq(m, -1);
    id = conv_bn_relu_q(m, id, m.input_channels, stage_widths[0]);
    int c = stage_widths[0];
    for (int stage = 0; stage < 4; ++stage) {
        const int w = stage_widths[static_cast<size_t>(stage)];
        for (int blk = 0; blk < 2; ++blk) {
            const int stride = (stage > 0 && blk == 0) ? 2 : 1;
            const int skip_src = id;
            int a = add_conv(m, id, c, w, 3, stride);
            a = add_bn(m, a, w);
            a = add_simple(m, a, LayerKind::ReLU);
            a = add_actq(m, a);
            a = add_conv(m, a, w, w, 3, 1);
            a = add_bn(m, a, w);
            int skip = skip_src;
            if (stride != 1 || c != w) {
                skip = add_conv(m, skip_src, c, w, 1, stride, 0);
                skip = add_bn(m, skip, w);
            }
            Layer addl;
            addl.kind = LayerKind::ResidualAdd;
            addl.inputs = {a, skip};
            id = add_layer(m, std::move(addl));
            id = add_simple(m, id, LayerKind::ReLU);
            id = add_actq(m, id);
            c = w;
        }
    }
    id = add_simple(m, id, LayerKind::AvgPool);
    add_linear(m, id, c, num_classes);
    m.validate();
    return m;
}

ModelGraph build_model(const std::string& arch, const std::vector<int>& widths, int num_classes,
                       int input_size, int input_channels) {
    if (arch == "toy-cnn") return build_toy_cnn(num_classes, input_size, input_channels);
    if (arch == "vgg9") return build_vgg9(widths, num_classes, input_size);
    if (arch == "vgg16") return build_vgg16(widths, num_classes, input_size);
    if (arch == "resnet18") return build_resnet18(widths, num_classes, input_size);
    throw std::runtime_error("unknown architecture: " + arch);
}

void init_params(ModelGraph& m, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (auto& l : m.layers) {
        if (l.kind == LayerKind::Conv) {
            const double std = std::sqrt(2.0 / double(l.in_ch * l.k * l.k));
            for (auto& v : l.weight.value.v) v = gauss(rng) * std;
            std::fill(l.bias.value.v.begin(), l.bias.value.v.end(), 0.0);
        } else if (l.kind == LayerKind::Linear) {
            const double std = std::sqrt(2.0 / double(l.in_features));
            for (auto& v : l.weight.value.v) v = gauss(rng) * std;
            std::fill(l.bias.value.v.begin(), l.bias.value.v.end(), 0.0);
        }
    }
}

int64_t param_count(const ModelGraph& m) {
    int64_t n = 0;
    for (auto& l : m.layers) {
        if (l.kind == LayerKind::Conv) n += int64_t(l.in_ch) * l.out_ch * l.k * l.k;
        if (l.kind == LayerKind::Linear) n += int64_t(l.in_features) * l.out_features;
    }
    return n;
}

ModelGraph fold_bn(const ModelGraph& m) {
    ModelGraph out;
    out.arch = m.arch;
    out.input_channels = m.input_channels;
    out.input_size = m.input_size;
    out.num_classes = m.num_classes;
    std::vector<int> remap(m.layers.size(), -1);
    for (auto& l : m.layers) {
        if (l.kind == LayerKind::BatchNorm) {
            const Layer& src = m.layer(l.inputs[0]);
            if (src.kind == LayerKind::Conv) {
                // folded into the conv; point consumers at the conv's new id
                remap[static_cast<size_t>(l.id)] = remap[static_cast<size_t>(src.id)];
                continue;
            }
        }
        Layer nl = l;
        nl.inputs.clear();
        for (int in : l.inputs) nl.inputs.push_back(remap[static_cast<size_t>(in)]);
        if (l.kind == LayerKind::Conv) {
            const int bn_id = m.bn_after(l.id);
            if (bn_id >= 0) {
                const Layer& bn = m.layer(bn_id);
                nl.weight = Param(Tensor(l.weight.value.shape));
                nl.bias = Param(Tensor({l.out_ch}));
                nl.has_bias = true;
                const int64_t per = l.weight.value.numel() / l.out_ch;
                for (int c = 0; c < l.out_ch; ++c) {
                    const double s = bn.gamma.value[c] / std::sqrt(bn.run_var[c] + bn.eps);
                    for (int64_t i = 0; i < per; ++i)
                        nl.weight.value[c * per + i] = l.weight.value[c * per + i] * s;
                    double b = bn.beta.value[c] - bn.run_mean[c] * s;
                    if (l.has_bias) b += l.bias.value[c] * s;
                    nl.bias.value[c] = b;
                }
            }
        }
        nl.id = static_cast<int>(out.layers.size());
        remap[static_cast<size_t>(l.id)] = nl.id;
        out.layers.push_back(std::move(nl));
    }
    out.validate();
    return out;
}

// --- checkpoint io ---

namespace {

constexpr char kMagic[8] = {'C', 'I', 'M', 'C', 'K', 'P', 'T', '\x01'};
constexpr int kVersion = 1;

struct BlobWriter {
    std::vector<double> data;
    json entries = json::array();
    void add(const std::string& name, const Tensor& t) {
        entries.push_back({{"name", name}, {"shape", t.shape}, {"offset", data.size()}});
        data.insert(data.end(), t.v.begin(), t.v.end());
    }
};

void for_each_tensor(ModelGraph& m, const std::function<void(const std::string&, Tensor&)>& fn) {
    for (auto& l : m.layers) {
        const std::string p = "L" + std::to_string(l.id) + ".";
        switch (l.kind) {
            case LayerKind::Conv:
                fn(p + "weight", l.weight.value);
                if (l.has_bias) fn(p + "bias", l.bias.value);
                if (l.wq.enabled) fn(p + "wq_step", l.wq.step.value);
                break;
            case LayerKind::Linear:
                fn(p + "weight", l.weight.value);
                fn(p + "bias", l.bias.value);
                break;
            case LayerKind::BatchNorm:
                fn(p + "gamma", l.gamma.value);
                fn(p + "beta", l.beta.value);
                fn(p + "run_mean", l.run_mean);
                fn(p + "run_var", l.run_var);
                break;
            case LayerKind::ActQuant: fn(p + "aq_step", l.aq.step.value); break;
            default: break;
        }
    }
}

json layer_to_json(const Layer& l) {
    json j;
    j["kind"] = kind_name(l.kind);
    j["inputs"] = l.inputs;
    switch (l.kind) {
        case LayerKind::Conv:
            j["in_ch"] = l.in_ch;
            j["out_ch"] = l.out_ch;
            j["k"] = l.k;
            j["stride"] = l.stride;
            j["pad"] = l.pad;
            j["has_bias"] = l.has_bias;
            j["wq_enabled"] = l.wq.enabled;
            j["pq_enabled"] = l.pq.enabled;
            j["pq_step"] = l.pq.step;
            break;
        case LayerKind::Linear:
            j["in_features"] = l.in_features;
            j["out_features"] = l.out_features;
            break;
        case LayerKind::BatchNorm:
            j["eps"] = l.eps;
            j["momentum"] = l.momentum;
            break;
        case LayerKind::MaxPool:
            j["pk"] = l.pk;
            j["ps"] = l.ps;
            break;
        case LayerKind::ActQuant: j["aq_bits"] = l.aq.bits; break;
        default: break;
    }
    return j;
}

Layer layer_from_json(const json& j, int id) {
    Layer l;
    l.id = id;
    l.kind = kind_from_name(j.at("kind").get<std::string>());
    l.inputs = j.at("inputs").get<std::vector<int>>();
    switch (l.kind) {
        case LayerKind::Conv:
            l.in_ch = j.at("in_ch");
            l.out_ch = j.at("out_ch");
            l.k = j.at("k");
            l.stride = j.at("stride");
            l.pad = j.at("pad");
            l.has_bias = j.at("has_bias");
            l.wq.enabled = j.at("wq_enabled");
            l.pq.enabled = j.at("pq_enabled");
            l.pq.step = j.at("pq_step");
            l.weight = Param(Tensor({l.out_ch, l.in_ch, l.k, l.k}));
            l.bias = Param(Tensor({l.out_ch}));
            if (l.wq.enabled) l.wq.step = Param(Tensor::scalar(1.0));
            break;
        case LayerKind::Linear:
            l.in_features = j.at("in_features");
            l.out_features = j.at("out_features");
            l.weight = Param(Tensor({l.out_features, l.in_features}));
            l.bias = Param(Tensor({l.out_features}));
            break;
        case LayerKind::BatchNorm:
            l.eps = j.at("eps");
            l.momentum = j.at("momentum");
            break;
        case LayerKind::MaxPool:
            l.pk = j.at("pk");
            l.ps = j.at("ps");
            break;
        case LayerKind::ActQuant:
            l.aq.bits = j.at("aq_bits");
            l.aq.step = Param(Tensor::scalar(1.0));
            break;
        default: break;
    }
    return l;
}

}  // namespace

void save_checkpoint(const ModelGraph& m, const std::string& path) {
    json header;
    header["version"] = kVersion;
    header["arch"] = m.arch;
    header["input_channels"] = m.input_channels;
    header["input_size"] = m.input_size;
    header["num_classes"] = m.num_classes;
    header["layers"] = json::array();
    for (auto& l : m.layers) header["layers"].push_back(layer_to_json(l));

    BlobWriter blob;
    for_each_tensor(const_cast<ModelGraph&>(m),
                    [&](const std::string& name, Tensor& t) { blob.add(name, t); });
    header["tensors"] = blob.entries;

    const std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    f.write(kMagic, 8);
    uint64_t len = hs.size();
    char lenb[8];
    for (int i = 0; i < 8; ++i) lenb[i] = char((len >> (8 * i)) & 0xff);
    f.write(lenb, 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    f.write(reinterpret_cast<const char*>(blob.data.data()),
            static_cast<std::streamsize>(blob.data.size() * sizeof(double)));
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

ModelGraph load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint: " + path);
    char lenb[8];
    f.read(lenb, 8);
    if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= uint64_t(static_cast<unsigned char>(lenb[i])) << (8 * i);
    std::string hs(len, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(len));
    if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    json header = json::parse(hs);
    if (header.at("version").get<int>() != kVersion)
        throw std::runtime_error("checkpoint version mismatch: " + path);

    ModelGraph m;
    m.arch = header.at("arch");
    m.input_channels = header.at("input_channels");
    m.input_size = header.at("input_size");
    m.num_classes = header.at("num_classes");
    int id = 0;
    for (auto& lj : header.at("layers")) m.layers.push_back(layer_from_json(lj, id++));

    // size BN tensors from shapes in the tensor table
    std::map<std::string, Tensor*> slots;
    const auto shapes = [&] {
        std::map<std::string, std::vector<int>> s;
        for (auto& e : header.at("tensors"))
            s[e.at("name").get<std::string>()] = e.at("shape").get<std::vector<int>>();
        return s;
    }();
    for (auto& l : m.layers)
        if (l.kind == LayerKind::BatchNorm) {
            const std::string p = "L" + std::to_string(l.id) + ".";
            auto it = shapes.find(p + "gamma");
            if (it == shapes.end()) throw std::runtime_error("checkpoint missing BN tensors");
            l.gamma = Param(Tensor(it->second));
            l.beta = Param(Tensor(it->second));
            l.run_mean = Tensor(it->second);
            l.run_var = Tensor(it->second);
        }
    for_each_tensor(m, [&](const std::string& name, Tensor& t) { slots[name] = &t; });

    for (auto& e : header.at("tensors")) {
        const std::string name = e.at("name");
        auto it = slots.find(name);
        if (it == slots.end()) throw std::runtime_error("unexpected tensor in checkpoint: " + name);
        Tensor& t = *it->second;
        const auto shape = e.at("shape").get<std::vector<int>>();
        if (shape != t.shape) throw std::runtime_error("tensor shape mismatch: " + name);
        const uint64_t off = e.at("offset");
        f.seekg(static_cast<std::streamoff>(16 + len + off * sizeof(double)));
        f.read(reinterpret_cast<char*>(t.v.data()),
               static_cast<std::streamsize>(t.v.size() * sizeof(double)));
        if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    }
    m.validate();
    return m;
}

}  // namespace cim

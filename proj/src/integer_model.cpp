#include "cim/integer_model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "cim/mapper.hpp"
#include "cim/qat.hpp"
#include "cim/quant.hpp"
#include "cim/rounding.hpp"
#include "cim/runner.hpp"

namespace cim {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'C', 'I', 'M', 'I', 'N', 'T', 'M', '\x01'};
constexpr int kVersion = 1;

std::vector<uint8_t> pack_codes(const std::vector<int8_t>& codes, int bits) {
    if (bits > 4) {
        std::vector<uint8_t> b(codes.size());
        std::memcpy(b.data(), codes.data(), codes.size());
        return b;
    }
    std::vector<uint8_t> b((codes.size() + 1) / 2, 0);
    for (size_t i = 0; i < codes.size(); ++i) {
        const uint8_t nib = static_cast<uint8_t>(codes[i] + 8) & 0xF;
        b[i / 2] |= (i % 2 == 0) ? nib : static_cast<uint8_t>(nib << 4);
    }
    return b;
}

std::vector<int8_t> unpack_codes(const std::vector<uint8_t>& b, size_t count, int bits) {
    std::vector<int8_t> codes(count);
    if (bits > 4) {
        std::memcpy(codes.data(), b.data(), count);
        return codes;
    }
    for (size_t i = 0; i < count; ++i) {
        const uint8_t nib = (i % 2 == 0) ? (b[i / 2] & 0xF) : (b[i / 2] >> 4);
        codes[i] = static_cast<int8_t>(int(nib) - 8);
    }
    return codes;
}

void write_doubles(std::ofstream& f, const std::vector<double>& v) {
    f.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> read_doubles(std::ifstream& f, size_t count) {
    std::vector<double> v(count);
    f.read(reinterpret_cast<char*>(v.data()),
           static_cast<std::streamsize>(count * sizeof(double)));
    if (!f) throw std::runtime_error("truncated integer model");
    return v;
}

}  // namespace

IntegerModel export_integer_model(const ModelGraph& m, const MacroConfig& macro,
                                  bool power_of_two) {
    const MappingPlan plan = build_plan(m, macro);
    std::map<int, int64_t> layer_cycles;
    for (const auto& tile : plan.tiles)
        for (const TileSlice& s : tile) {
            const LayerMapping* lm = nullptr;
            for (const auto& l : plan.layers)
                if (l.layer_id == s.layer_id) lm = &l;
            layer_cycles[s.layer_id] += int64_t(lm->out_h) * lm->out_w *
                                        ((s.columns + macro.adc_count - 1) / macro.adc_count);
        }
    std::map<int, const LayerMapping*> layer_map;
    for (const auto& l : plan.layers) layer_map[l.layer_id] = &l;

    const ClipBounds wb = clip_bounds(macro.weight_bits);
    IntegerModel im;
    im.macro = macro;
    im.power_of_two = power_of_two;
    im.input_channels = m.input_channels;
    im.input_size = m.input_size;
    im.num_classes = m.num_classes;

    for (const Layer& l : m.layers) {
        IntLayer il;
        il.kind = l.kind;
        il.inputs = l.inputs;
        switch (l.kind) {
            case LayerKind::Conv: {
                if (!l.wq.enabled || !l.pq.enabled)
                    throw std::runtime_error(
                        "export requires phase-2 quantizers on conv " + std::to_string(l.id) +
                        "; run qat-phase2 first");
                il.in_ch = l.in_ch;
                il.out_ch = l.out_ch;
                il.k = l.k;
                il.stride = l.stride;
                il.pad = l.pad;
                il.seg_channels = split_channels(l.in_ch, channels_per_bitline(macro, l.k));
                il.s_w = l.wq.step.value[0];
                il.s_a = input_act_step(m, l.id);
                il.s_adc = l.pq.step;
                const double s = il.s_w * il.s_adc;
                if (power_of_two) {
                    const double l2 = std::log2(s);
                    const int shift = static_cast<int>(round_half_away(l2));
                    if (std::abs(shift) > 31)
                        throw std::runtime_error("power-of-two scale exponent out of range: " +
                                                 std::to_string(shift));
                    il.shift = shift;
                    il.scale = std::ldexp(1.0, shift);
                    il.scale_error = std::abs(il.scale - s) / s;
                } else {
                    il.scale = s;
                }
                const Tensor qw =
                    quantize_weights(folded_conv_weights(m, l.id), il.s_w, wb).codes;
                il.qw.resize(static_cast<size_t>(qw.numel()));
                for (int64_t i = 0; i < qw.numel(); ++i)
                    il.qw[static_cast<size_t>(i)] = static_cast<int8_t>(qw[i]);
                const Tensor bias = folded_conv_bias(m, l.id);
                il.bias.assign(bias.v.begin(), bias.v.end());
                const LayerMapping* lm = layer_map.at(l.id);
                il.conversions = int64_t(lm->out_h) * lm->out_w * lm->columns;
                il.cycles = layer_cycles[l.id];
                break;
            }
            case LayerKind::Linear:
                il.in_features = l.in_features;
                il.out_features = l.out_features;
                il.lw.assign(l.weight.value.v.begin(), l.weight.value.v.end());
                il.lb.assign(l.bias.value.v.begin(), l.bias.value.v.end());
                break;
            case LayerKind::MaxPool:
                il.pk = l.pk;
                il.ps = l.ps;
                break;
            case LayerKind::ActQuant:
                il.aq_step = l.aq.step.value[0];
                il.aq_bits = l.aq.bits;
                break;
            default: break;  // BN alias / ReLU / pools / flatten / residual add
        }
        im.layers.push_back(std::move(il));
    }
    return im;
}

void save_integer_model(const IntegerModel& im, const std::string& path) {
    json h;
    h["version"] = kVersion;
    h["macro"] = im.macro.to_json();
    h["power_of_two"] = im.power_of_two;
    h["input_channels"] = im.input_channels;
    h["input_size"] = im.input_size;
    h["num_classes"] = im.num_classes;
    h["layers"] = json::array();
    for (const IntLayer& l : im.layers) {
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
                j["seg_channels"] = l.seg_channels;
                j["s_w"] = l.s_w;
                j["s_a"] = l.s_a;
                j["s_adc"] = l.s_adc;
                j["scale"] = l.scale;
                j["shift"] = l.shift;
                j["scale_error"] = l.scale_error;
                j["conversions"] = l.conversions;
                j["cycles"] = l.cycles;
                break;
            case LayerKind::Linear:
                j["in_features"] = l.in_features;
                j["out_features"] = l.out_features;
                break;
            case LayerKind::MaxPool:
                j["pk"] = l.pk;
                j["ps"] = l.ps;
                break;
            case LayerKind::ActQuant:
                j["aq_step"] = l.aq_step;
                j["aq_bits"] = l.aq_bits;
                break;
            default: break;
        }
        h["layers"].push_back(std::move(j));
    }
    const std::string header = h.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write integer model: " + path);
    f.write(kMagic, sizeof(kMagic));
    const uint64_t hlen = header.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const IntLayer& l : im.layers) {
        if (l.kind == LayerKind::Conv) {
            const auto packed = pack_codes(l.qw, im.macro.weight_bits);
            f.write(reinterpret_cast<const char*>(packed.data()),
                    static_cast<std::streamsize>(packed.size()));
            write_doubles(f, l.bias);
        } else if (l.kind == LayerKind::Linear) {
            write_doubles(f, l.lw);
            write_doubles(f, l.lb);
        }
    }
    if (!f) throw std::runtime_error("write failed: " + path);
}

IntegerModel load_integer_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open integer model: " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("not an integer model file: " + path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string header(hlen, '\0');
    f.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw std::runtime_error("truncated integer model");
    const json h = json::parse(header);
    if (h.at("version") != kVersion)
        throw std::runtime_error("integer model version mismatch");

    IntegerModel im;
    im.macro = MacroConfig::from_json(h.at("macro"));
    im.power_of_two = h.at("power_of_two");
    im.input_channels = h.at("input_channels");
    im.input_size = h.at("input_size");
    im.num_classes = h.at("num_classes");
    for (const json& j : h.at("layers")) {
        IntLayer l;
        l.kind = kind_from_name(j.at("kind").get<std::string>());
        l.inputs = j.at("inputs").get<std::vector<int>>();
        switch (l.kind) {
            case LayerKind::Conv: {
                l.in_ch = j.at("in_ch");
                l.out_ch = j.at("out_ch");
                l.k = j.at("k");
                l.stride = j.at("stride");
                l.pad = j.at("pad");
                l.seg_channels = j.at("seg_channels").get<std::vector<int>>();
                l.s_w = j.at("s_w");
                l.s_a = j.at("s_a");
                l.s_adc = j.at("s_adc");
                l.scale = j.at("scale");
                l.shift = j.at("shift");
                l.scale_error = j.at("scale_error");
                l.conversions = j.at("conversions");
                l.cycles = j.at("cycles");
                const size_t n = size_t(l.out_ch) * l.in_ch * l.k * l.k;
                const size_t bytes = im.macro.weight_bits > 4 ? n : (n + 1) / 2;
                std::vector<uint8_t> packed(bytes);
                f.read(reinterpret_cast<char*>(packed.data()),
                       static_cast<std::streamsize>(bytes));
                if (!f) throw std::runtime_error("truncated integer model");
                l.qw = unpack_codes(packed, n, im.macro.weight_bits);
                l.bias = read_doubles(f, static_cast<size_t>(l.out_ch));
                break;
            }
            case LayerKind::Linear:
                l.in_features = j.at("in_features");
                l.out_features = j.at("out_features");
                l.lw = read_doubles(f, size_t(l.out_features) * l.in_features);
                l.lb = read_doubles(f, static_cast<size_t>(l.out_features));
                break;
            case LayerKind::MaxPool:
                l.pk = j.at("pk");
                l.ps = j.at("ps");
                break;
            case LayerKind::ActQuant:
                l.aq_step = j.at("aq_step");
                l.aq_bits = j.at("aq_bits");
                break;
            default: break;
        }
        im.layers.push_back(std::move(l));
    }
    return im;
}

}  // namespace cim

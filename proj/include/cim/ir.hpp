#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cim/tensor.hpp"

namespace cim {

enum class LayerKind { Conv, BatchNorm, ReLU, MaxPool, AvgPool, Flatten, Linear, ResidualAdd, ActQuant };

const char* kind_name(LayerKind k);
LayerKind kind_from_name(const std::string& s);

struct WeightQuantState {
    Param step;  // scalar S_W
    bool enabled = false;
};
struct ActQuantState {
    Param step;  // scalar S_A
    int bits = 4;
};
struct PsumQuantState {
    double step = 0.0;  // S_ADC, fixed after calibration
    bool enabled = false;
};

// One layer of the network IR. Fields are used according to kind.
struct Layer {
    int id = -1;
    LayerKind kind = LayerKind::ReLU;
    std::vector<int> inputs;  // producer layer ids; empty = model input

    // conv
    int in_ch = 0, out_ch = 0, k = 0, stride = 1, pad = 0;
    Param weight, bias;
    bool has_bias = false;
    WeightQuantState wq;
    PsumQuantState pq;

    // linear
    int in_features = 0, out_features = 0;

    // batchnorm
    Param gamma, beta;
    Tensor run_mean, run_var;
    double eps = 1e-5, momentum = 0.1;

    // pool
    int pk = 2, ps = 2;

    // act quant
    ActQuantState aq;
};

struct TensorShape {
    int c = 0, h = 0, w = 0;  // h=w=0 for 2-D feature outputs
    bool flat = false;
    int features() const { return flat ? c : c * h * w; }
};

struct ModelGraph {
    std::string arch = "custom";
    int input_channels = 3;
    int input_size = 16;
    int num_classes = 2;
    std::vector<Layer> layers;  // topological order; layer id == index

    Layer& layer(int id) { return layers[static_cast<size_t>(id)]; }
    const Layer& layer(int id) const { return layers[static_cast<size_t>(id)]; }
    int output_id() const { return static_cast<int>(layers.size()) - 1; }

    std::vector<Param*> all_params();
    std::vector<int> conv_ids() const;
    // BatchNorm layer directly consuming this conv's output, or -1.
    int bn_after(int conv_id) const;
    void validate() const;

    // Per-layer output shapes (index by layer id); index layers.size() = model input shape.
    std::vector<TensorShape> infer_shapes() const;
};

// --- channel grouping (residual-aware) ---

struct ChannelGroup {
    std::vector<int> conv_producers;
    std::vector<int> bn_members;
    std::vector<int> conv_consumers;
    std::vector<int> linear_consumers;
    int channels = 0;
};

struct ChannelGroups {
    std::vector<int> group_of;  // layer id -> group index; -1 for layers without a channel space
    std::vector<ChannelGroup> groups;
    static constexpr int kInputGroup = 0;  // model-input channels; never resized
};

ChannelGroups analyze_channels(const ModelGraph& m);

// --- builders ---

ModelGraph build_toy_cnn(int num_classes, int input_size = 16, int input_channels = 3);
ModelGraph build_vgg9(const std::vector<int>& widths, int num_classes, int input_size = 32);
ModelGraph build_vgg16(const std::vector<int>& widths, int num_classes, int input_size = 32);
ModelGraph build_resnet18(const std::vector<int>& stage_widths, int num_classes,
                          int input_size = 32);
ModelGraph build_model(const std::string& arch, const std::vector<int>& widths, int num_classes,
                       int input_size, int input_channels);

void init_params(ModelGraph& m, std::mt19937_64& rng);

// --- operations ---

// Conv/linear weight count; BN params excluded (they fold into conv).
int64_t param_count(const ModelGraph& m);

// Absorbs each conv's following BN (inference statistics) into the conv.
// Convs without a BN successor pass through unchanged. Idempotent.
ModelGraph fold_bn(const ModelGraph& m);

void save_checkpoint(const ModelGraph& m, const std::string& path);
ModelGraph load_checkpoint(const std::string& path);

}  // namespace cim

#include "cim/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <stdexcept>

namespace cim {

using nlohmann::json;

PipelineConfig PipelineConfig::from_json(const json& j) {
    PipelineConfig c;
    if (j.contains("macro")) c.macro = MacroConfig::from_json(j.at("macro"));
    if (j.contains("model")) {
        const json& m = j.at("model");
        c.arch = m.value("arch", c.arch);
        c.widths = m.value("widths", c.widths);
        c.num_classes = m.value("num_classes", c.num_classes);
        c.input_size = m.value("input_size", c.input_size);
        c.input_channels = m.value("input_channels", c.input_channels);
    }
    if (j.contains("data")) {
        const json& d = j.at("data");
        c.dataset = d.value("dataset", c.dataset);
        c.data_dir = d.value("dir", c.data_dir);
        c.per_class = d.value("per_class", c.per_class);
        c.test_per_class = d.value("test_per_class", c.test_per_class);
        c.noise = d.value("noise", c.noise);
        c.augment = d.value("augment", c.augment);
        c.limit = d.value("limit", c.limit);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        c.seed_epochs = t.value("seed_epochs", c.seed_epochs);
        c.seed_lr = t.value("seed_lr", c.seed_lr);
        c.batch = t.value("batch", c.batch);
    }
    if (j.contains("morph")) {
        const json& m = j.at("morph");
        c.morph.lambda_max = m.value("lambda_max", c.morph.lambda_max);
        c.morph.ramp_epochs = m.value("ramp_epochs", c.morph.ramp_epochs);
        c.morph.tau = m.value("tau", c.morph.tau);
        c.morph.target_bl = m.value("target_bl", c.morph.target_bl);
        c.target_frac = m.value("target_frac", c.target_frac);
        c.morph.ratio_step = m.value("ratio_step", c.morph.ratio_step);
        c.morph.ratio_cap = m.value("ratio_cap", c.morph.ratio_cap);
        c.morph.iterations = m.value("iterations", c.morph.iterations);
        c.morph.shrink_epochs = m.value("shrink_epochs", c.morph.shrink_epochs);
        c.morph.finetune_epochs = m.value("finetune_epochs", c.morph.finetune_epochs);
        c.morph.shrink_lr = m.value("shrink_lr", c.morph.shrink_lr);
        c.morph.finetune_lr = m.value("finetune_lr", c.morph.finetune_lr);
        c.morph.finetune_each_iteration =
            m.value("finetune_each_iteration", c.morph.finetune_each_iteration);
    }
    if (j.contains("qat")) {
        const json& q = j.at("qat");
        c.qat.phase1_epochs = q.value("phase1_epochs", c.qat.phase1_epochs);
        c.qat.phase2_epochs = q.value("phase2_epochs", c.qat.phase2_epochs);
        c.qat.phase1_lr = q.value("phase1_lr", c.qat.phase1_lr);
        c.qat.phase2_lr = q.value("phase2_lr", c.qat.phase2_lr);
        c.qat.calib_percentile = q.value("calib_percentile", c.qat.calib_percentile);
        c.qat.calib_images = q.value("calib_images", c.qat.calib_images);
    }
    c.morph.batch = c.batch;
    c.qat.batch = c.batch;
    return c;
}

PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("config parse error in " + path + ": " + e.what());
    }
    return PipelineConfig::from_json(j);
}

namespace {
int scaled(int epochs, double s) {
    if (epochs <= 0) return epochs;
    return std::max(1, static_cast<int>(std::lround(epochs * s)));
}
}  // namespace

void scale_epochs(PipelineConfig& c, double scale) {
    if (scale <= 0) throw std::runtime_error("scale must be positive");
    if (scale == 1.0) return;
    c.seed_epochs = scaled(c.seed_epochs, scale);
    c.morph.shrink_epochs = scaled(c.morph.shrink_epochs, scale);
    c.morph.finetune_epochs = scaled(c.morph.finetune_epochs, scale);
    c.morph.ramp_epochs = scaled(c.morph.ramp_epochs, scale);
    c.qat.phase1_epochs = scaled(c.qat.phase1_epochs, scale);
    c.qat.phase2_epochs = scaled(c.qat.phase2_epochs, scale);
}

namespace {
// Train and test must share one generator seed: the class prototypes are
// derived from it, so sampling the two splits with different seeds would
// produce two unrelated tasks. Draw one pool and carve the test split off
// the front of each class.
Dataset synthetic_split(const PipelineConfig& c, uint64_t seed, bool test) {
    Dataset all = synthetic_dataset(c.num_classes, c.per_class + c.test_per_class,
                                    c.input_size, seed ^ 0x73796e7468ull, c.noise);
    Dataset d;
    d.classes = all.classes;
    d.channels = all.channels;
    d.resolution = all.resolution;
    std::vector<int> taken(static_cast<size_t>(all.classes), 0);
    for (size_t i = 0; i < all.images.size(); ++i) {
        const bool in_test = taken[static_cast<size_t>(all.labels[i])]++ < c.test_per_class;
        if (in_test != test) continue;
        d.images.push_back(std::move(all.images[i]));
        d.labels.push_back(all.labels[i]);
    }
    return d;
}
}  // namespace

Dataset make_train_dataset(const PipelineConfig& c, uint64_t seed) {
    if (c.dataset == "synthetic")
        return synthetic_split(c, seed, false);
    if (c.dataset == "cifar10") {
        Dataset d = load_cifar10_binary(c.data_dir, true);
        if (c.limit > 0 && d.size() > static_cast<size_t>(c.limit)) {
            d.images.resize(static_cast<size_t>(c.limit));
            d.labels.resize(static_cast<size_t>(c.limit));
        }
        return d;
    }
    throw std::runtime_error("unknown dataset: " + c.dataset);
}

Dataset make_test_dataset(const PipelineConfig& c, uint64_t seed) {
    if (c.dataset == "synthetic")
        return synthetic_split(c, seed, true);
    if (c.dataset == "cifar10") {
        Dataset d = load_cifar10_binary(c.data_dir, false);
        if (c.limit > 0 && d.size() > static_cast<size_t>(c.limit)) {
            d.images.resize(static_cast<size_t>(c.limit));
            d.labels.resize(static_cast<size_t>(c.limit));
        }
        return d;
    }
    throw std::runtime_error("unknown dataset: " + c.dataset);
}

ModelGraph build_baseline(const PipelineConfig& c) {
    return build_model(c.arch, c.widths, c.num_classes, c.input_size, c.input_channels);
}

std::string config_hash(const std::string& text) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    char buf[19];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string format_delta(double baseline, double adapted) {
    if (baseline == 0.0) return "n/a";
    const long pct = std::lround((adapted - baseline) / baseline * 100.0);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%+ld%%", pct);
    return buf;
}

json run_manifest(const std::string& stage, const std::string& config_text, uint64_t seed,
                  double scale) {
    return json{{"stage", stage},
                {"config_hash", config_hash(config_text)},
                {"seed", seed},
                {"scale", scale},
                {"format_version", 1}};
}

}  // namespace cim

#pragma once

#include <nlohmann/json_fwd.hpp>
#include <string>

#include "cim/data.hpp"
#include "cim/ir.hpp"
#include "cim/macro.hpp"
#include "cim/morph.hpp"
#include "cim/qat.hpp"

namespace cim {

struct PipelineConfig {
    MacroConfig macro;

    std::string arch = "toy-cnn";
    std::vector<int> widths;
    int num_classes = 2;
    int input_size = 16;
    int input_channels = 3;

    std::string dataset = "synthetic";  // synthetic | cifar10
    std::string data_dir;
    int per_class = 160;
    int test_per_class = 40;
    double noise = 0.25;
    bool augment = false;
    int limit = 0;  // cap on loaded CIFAR records, 0 = all

    int seed_epochs = 20;
    double seed_lr = 0.01;
    int batch = 32;

    MorphConfig morph;        // target_bl 0 means target_frac of the baseline
    double target_frac = 0.5;
    QatConfig qat;

    static PipelineConfig from_json(const nlohmann::json& j);
};

PipelineConfig load_pipeline_config(const std::string& path);

// Multiplies every epoch count by `scale`, flooring at 1 epoch.
void scale_epochs(PipelineConfig& c, double scale);

Dataset make_train_dataset(const PipelineConfig& c, uint64_t seed);
Dataset make_test_dataset(const PipelineConfig& c, uint64_t seed);

ModelGraph build_baseline(const PipelineConfig& c);

// Stable config fingerprint (FNV-1a over the raw config text).
std::string config_hash(const std::string& text);

// Signed percent delta, Table-style: "-79%", "+3%".
std::string format_delta(double baseline, double adapted);

nlohmann::json run_manifest(const std::string& stage, const std::string& config_text,
                            uint64_t seed, double scale);

}  // namespace cim

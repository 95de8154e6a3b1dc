#pragma once

#include <random>
#include <string>
#include <vector>

#include "cim/tensor.hpp"

namespace cim {

struct Dataset {
    int classes = 0;
    int channels = 0;
    int resolution = 0;
    std::vector<std::vector<float>> images;  // [C*H*W], values in [0,1]
    std::vector<int> labels;

    size_t size() const { return images.size(); }
};

// One CIFAR-10 binary batch file: 10000 records of 1 label byte + 3072 pixels.
Dataset load_cifar10_file(const std::string& path);
// Loads data_batch_1..5.bin (train) or test_batch.bin from dir.
Dataset load_cifar10_binary(const std::string& dir, bool train);

// Seeded Gaussian-blob class prototypes plus per-sample noise.
Dataset synthetic_dataset(int classes, int per_class, int resolution, uint64_t seed,
                          double noise = 0.25);

// Class prototypes of the synthetic generator (for nearest-prototype oracles).
std::vector<std::vector<float>> synthetic_prototypes(int classes, int resolution, uint64_t seed);

// Assembles a [N,C,H,W] batch. With augment set, applies seeded random
// crop (pad 4) and horizontal flip.
struct Batch {
    Tensor x;
    std::vector<int> labels;
};
Batch make_batch(const Dataset& d, const std::vector<size_t>& idx, bool augment = false,
                 std::mt19937_64* rng = nullptr);

// Seed-deterministic shuffled epoch order covering every record exactly once.
std::vector<size_t> epoch_order(size_t n, std::mt19937_64& rng);

}  // namespace cim

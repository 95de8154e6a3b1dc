#include "cim/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace cim {

namespace {
constexpr int kCifarDim = 32;
constexpr int kCifarRecord = 1 + 3 * kCifarDim * kCifarDim;
constexpr int kCifarRecords = 10000;
constexpr int64_t kCifarFileSize = int64_t(kCifarRecord) * kCifarRecords;  // 30730000
}  // namespace

Dataset load_cifar10_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("cannot open CIFAR-10 batch: " + path);
    const int64_t size = f.tellg();
    if (size != kCifarFileSize)
        throw std::runtime_error("bad CIFAR-10 batch size for " + path + ": expected " +
                                 std::to_string(kCifarFileSize) + " bytes, got " +
                                 std::to_string(size));
    f.seekg(0);
    Dataset d;
    d.classes = 10;
    d.channels = 3;
    d.resolution = kCifarDim;
    std::vector<unsigned char> rec(kCifarRecord);
    for (int i = 0; i < kCifarRecords; ++i) {
        f.read(reinterpret_cast<char*>(rec.data()), kCifarRecord);
        if (!f) throw std::runtime_error("truncated CIFAR-10 batch: " + path);
        d.labels.push_back(rec[0]);
        std::vector<float> img(3 * kCifarDim * kCifarDim);
        for (size_t p = 0; p < img.size(); ++p) img[p] = float(rec[1 + p]) / 255.0f;
        d.images.push_back(std::move(img));
    }
    return d;
}

Dataset load_cifar10_binary(const std::string& dir, bool train) {
    Dataset all;
    const std::vector<std::string> files =
        train ? std::vector<std::string>{"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                                         "data_batch_4.bin", "data_batch_5.bin"}
              : std::vector<std::string>{"test_batch.bin"};
    for (auto& name : files) {
        Dataset d = load_cifar10_file(dir + "/" + name);
        if (all.images.empty()) all = std::move(d);
        else {
            all.images.insert(all.images.end(), d.images.begin(), d.images.end());
            all.labels.insert(all.labels.end(), d.labels.begin(), d.labels.end());
        }
    }
    return all;
}

std::vector<std::vector<float>> synthetic_prototypes(int classes, int resolution, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::vector<std::vector<float>> protos;
    const int ch = 3, blobs = 4;
    for (int c = 0; c < classes; ++c) {
        std::vector<float> img(static_cast<size_t>(ch) * resolution * resolution, 0.0f);
        for (int b = 0; b < blobs; ++b) {
            const double cx = uni(rng) * resolution, cy = uni(rng) * resolution;
            const double sigma = (0.1 + 0.15 * uni(rng)) * resolution;
            const double amp = 0.4 + 0.6 * uni(rng);
            const int chan = int(uni(rng) * ch) % ch;
            for (int y = 0; y < resolution; ++y)
                for (int x = 0; x < resolution; ++x) {
                    const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    img[(static_cast<size_t>(chan) * resolution + y) * resolution + x] +=
                        float(amp * std::exp(-d2 / (2.0 * sigma * sigma)));
                }
        }
        for (auto& v : img) v = std::min(v, 1.0f);
        protos.push_back(std::move(img));
    }
    return protos;
}

Dataset synthetic_dataset(int classes, int per_class, int resolution, uint64_t seed,
                          double noise) {
    if (classes < 2) throw std::runtime_error("synthetic_dataset: classes must be >= 2");
    auto protos = synthetic_prototypes(classes, resolution, seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Dataset d;
    d.classes = classes;
    d.channels = 3;
    d.resolution = resolution;
    for (int c = 0; c < classes; ++c)
        for (int i = 0; i < per_class; ++i) {
            std::vector<float> img = protos[static_cast<size_t>(c)];
            for (auto& v : img)
                v = float(std::clamp(double(v) + noise * gauss(rng), 0.0, 1.0));
            d.images.push_back(std::move(img));
            d.labels.push_back(c);
        }
    return d;
}

Batch make_batch(const Dataset& d, const std::vector<size_t>& idx, bool augment,
                 std::mt19937_64* rng) {
    const int C = d.channels, R = d.resolution;
    Batch b;
    b.x = Tensor({static_cast<int>(idx.size()), C, R, R});
    for (size_t n = 0; n < idx.size(); ++n) {
        const auto& img = d.images[idx[n]];
        b.labels.push_back(d.labels[idx[n]]);
        int dx = 0, dy = 0;
        bool flip = false;
        if (augment && rng) {
            dx = int((*rng)() % 9) - 4;  // crop shift in [-4, 4]
            dy = int((*rng)() % 9) - 4;
            flip = ((*rng)() & 1) != 0;
        }
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < R; ++y)
                for (int x = 0; x < R; ++x) {
                    const int sy = y + dy;
                    int sx = x + dx;
                    if (flip) sx = R - 1 - sx;
                    double v = 0.0;
                    if (sy >= 0 && sy < R && sx >= 0 && sx < R)
                        v = img[(static_cast<size_t>(c) * R + sy) * R + sx];
                    b.x[((n * C + c) * static_cast<size_t>(R) + y) * R + x] = v;
                }
    }
    return b;
}

std::vector<size_t> epoch_order(size_t n, std::mt19937_64& rng) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

}  // namespace cim

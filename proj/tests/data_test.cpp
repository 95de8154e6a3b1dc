#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "cim/data.hpp"

using namespace cim;

TEST_SUITE("data") {

TEST_CASE("synthetic dataset is seed deterministic") {
    Dataset a = synthetic_dataset(4, 10, 8, 99);
    Dataset b = synthetic_dataset(4, 10, 8, 99);
    REQUIRE(a.size() == 40);
    CHECK(a.labels == b.labels);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a.images[i] == b.images[i]);

    Dataset c = synthetic_dataset(4, 10, 8, 100);
    CHECK(a.images[0] != c.images[0]);

    CHECK_THROWS_AS(synthetic_dataset(1, 10, 8, 99), std::runtime_error);
}

TEST_CASE("nearest prototype classifies perfectly at high SNR") {
    const uint64_t seed = 7;
    const int classes = 5, res = 8;
    Dataset d = synthetic_dataset(classes, 20, res, seed, 0.01);
    const auto protos = synthetic_prototypes(classes, res, seed);
    int correct = 0;
    for (size_t i = 0; i < d.size(); ++i) {
        double best = 1e300;
        int arg = -1;
        for (int c = 0; c < classes; ++c) {
            double dist = 0.0;
            for (size_t p = 0; p < protos[size_t(c)].size(); ++p) {
                const double diff = double(d.images[i][p]) - double(protos[size_t(c)][p]);
                dist += diff * diff;
            }
            if (dist < best) { best = dist; arg = c; }
        }
        correct += (arg == d.labels[i]);
    }
    CHECK(correct == int(d.size()));
}

TEST_CASE("cifar10 loader validates file size") {
    const std::string p = "/tmp/bad_batch.bin";
    std::ofstream(p, std::ios::binary).write("abc", 3);
    CHECK_THROWS_WITH_AS(load_cifar10_file(p), doctest::Contains("30730000"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(load_cifar10_file("/tmp/nope_missing.bin"),
                         doctest::Contains("cannot open"), std::runtime_error);
    std::remove(p.c_str());
}

TEST_CASE("cifar10 loader parses a well-formed batch") {
    // tiny synthetic batch with the exact record layout
    const std::string p = "/tmp/ok_batch.bin";
    {
        std::ofstream f(p, std::ios::binary);
        std::vector<unsigned char> rec(3073, 0);
        for (int i = 0; i < 10000; ++i) {
            rec[0] = static_cast<unsigned char>(i % 10);
            rec[1] = 255;  // first red pixel
            f.write(reinterpret_cast<const char*>(rec.data()), 3073);
        }
    }
    Dataset d = load_cifar10_file(p);
    CHECK(d.size() == 10000);
    CHECK(d.labels[9] == 9);
    CHECK(d.images[0][0] == doctest::Approx(1.0));
    CHECK(d.images[0][1] == 0.0);
    std::remove(p.c_str());
}

TEST_CASE("epoch order covers every record once") {
    std::mt19937_64 rng(3);
    const auto order = epoch_order(100, rng);
    CHECK(order.size() == 100);
    CHECK(std::set<size_t>(order.begin(), order.end()).size() == 100);

    std::mt19937_64 r1(5), r2(5);
    CHECK(epoch_order(50, r1) == epoch_order(50, r2));
}

TEST_CASE("make_batch assembles NCHW tensors") {
    Dataset d = synthetic_dataset(2, 4, 8, 11);
    Batch b = make_batch(d, {0, 5});
    REQUIRE(b.x.shape == std::vector<int>{2, 3, 8, 8});
    CHECK(b.labels == std::vector<int>{0, 1});
    CHECK(b.x[0] == doctest::Approx(double(d.images[0][0])));

    // augmentation is seed deterministic
    std::mt19937_64 ra(9), rb(9);
    Batch x = make_batch(d, {1, 2, 3}, true, &ra);
    Batch y = make_batch(d, {1, 2, 3}, true, &rb);
    for (int64_t i = 0; i < x.x.numel(); ++i) CHECK(x.x[i] == y.x[i]);
}

}

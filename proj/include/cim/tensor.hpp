#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cim {

// Dense double-precision tensor, row-major.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(count(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        if (v.size() != static_cast<size_t>(count(shape)))
            throw std::runtime_error("tensor: value count does not match shape");
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double x) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), x);
        return t;
    }
    static Tensor scalar(double x) { return Tensor({1}, {x}); }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    bool empty() const { return v.empty(); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    double& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i)
            s += (i ? "," : "") + std::to_string(shape[i]);
        return s + "]";
    }
};

// Trainable (or frozen) tensor with gradient and Adam slots.
struct Param {
    Tensor value;
    Tensor grad;    // empty until first backward
    Tensor adam_m, adam_v;
    int64_t adam_t = 0;
    bool trainable = true;

    Param() = default;
    explicit Param(Tensor t, bool train = true) : value(std::move(t)), trainable(train) {}

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.v.begin(), grad.v.end(), 0.0);
    }
    void accumulate_grad(const Tensor& g) {
        if (grad.empty()) grad = Tensor(value.shape);
        for (int64_t i = 0; i < g.numel(); ++i) grad[i] += g[i];
    }
};

}  // namespace cim

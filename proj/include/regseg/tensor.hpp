#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "regseg/common.hpp"

namespace regseg {

// Dense row-major double tensor. Spatial tensors use the layout
// [C][D][H][W] in memory (x fastest) with shape written {C, W, H, D};
// the indexing helpers below keep that convention in one place.
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
        v.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
        std::int64_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<std::int64_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<std::int64_t> s, double value) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    static Tensor scalar(double x) {
        Tensor t({1});
        t.v[0] = x;
        return t;
    }

    static Tensor from(std::vector<std::int64_t> s, std::vector<double> data) {
        Tensor t;
        t.shape = std::move(s);
        require(static_cast<std::int64_t>(data.size()) == numel_of(t.shape),
                "Tensor::from: data size does not match shape");
        t.v = std::move(data);
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }

    double& operator[](std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << ")";
        return os.str();
    }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

// Flat index into a [C][D][H][W] block (x fastest).
inline std::int64_t vox_index(std::int64_t c, std::int64_t x, std::int64_t y, std::int64_t z,
                              std::int64_t W, std::int64_t H, std::int64_t D) {
    return ((c * D + z) * H + y) * W + x;
}

}  // namespace regseg

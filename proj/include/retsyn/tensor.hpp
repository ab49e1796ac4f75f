#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <vector>

#include "retsyn/common.hpp"

namespace retsyn {

// Dense row-major float tensor. Convention for 4-D data is NCHW.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, float v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    // NCHW accessors; valid only for 4-D tensors.
    int n() const { assert(ndim() == 4); return shape[0]; }
    int c() const { assert(ndim() == 4); return shape[1]; }
    int h() const { assert(ndim() == 4); return shape[2]; }
    int w() const { assert(ndim() == 4); return shape[3]; }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    float& at4(int n_, int c_, int h_, int w_) {
        return data[((static_cast<size_t>(n_) * shape[1] + c_) * shape[2] + h_) * shape[3] + w_];
    }
    float at4(int n_, int c_, int h_, int w_) const {
        return data[((static_cast<size_t>(n_) * shape[1] + c_) * shape[2] + h_) * shape[3] + w_];
    }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor reshaped(std::vector<int> s) const {
        if (numel_of(s) != numel()) raise("reshape: element count mismatch");
        Tensor t = *this;
        t.shape = std::move(s);
        return t;
    }
};

// 2-D image with values in [0,1]; the unit most of the pipeline moves around.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> pix;

    Image() = default;
    Image(int h, int w) : height(h), width(w), pix(static_cast<size_t>(h) * w, 0.0f) {}

    float& at(int r, int c) { return pix[static_cast<size_t>(r) * width + c]; }
    float at(int r, int c) const { return pix[static_cast<size_t>(r) * width + c]; }
    size_t numel() const { return pix.size(); }
};

}  // namespace retsyn

#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "diffseg/errors.hpp"

namespace diffseg {

// Dense row-major float tensor, rank 1..4. Value semantics: copies are deep.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> dims, float fill = 0.0f);
    Tensor(std::initializer_list<int> dims, float fill = 0.0f) : Tensor(std::vector<int>(dims), fill) {}

    static Tensor from_data(std::vector<int> dims, std::vector<float> data);

    const std::vector<int>& dims() const { return dims_; }
    int rank() const { return static_cast<int>(dims_.size()); }
    int dim(int i) const { return dims_.at(static_cast<size_t>(i)); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& storage() { return data_; }
    const std::vector<float>& storage() const { return data_; }

    float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // NCHW / CHW accessors; no bounds checks beyond debug asserts.
    float& at4(int n, int c, int h, int w);
    float at4(int n, int c, int h, int w) const;
    float& at3(int c, int h, int w);
    float at3(int c, int h, int w) const;

    bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }
    std::string shape_str() const;

    Tensor reshaped(std::vector<int> dims) const;

    bool all_finite() const;
    float min() const;
    float max() const;
    double sum() const; // accumulated in double

    // Bitwise content hash (FNV-1a over shape and raw float bits).
    uint64_t content_hash() const;

private:
    std::vector<int> dims_;
    std::vector<float> data_;
};

std::string shape_str(const std::vector<int>& dims);

// FNV-1a 64-bit over an arbitrary byte range; seed chains multiple calls.
uint64_t fnv1a64(const void* bytes, size_t len, uint64_t seed = 0xcbf29ce484222325ULL);

// --- plain (non-differentiable) tensor helpers -----------------------------

// [C,H,W] or [N,C,H,W] -> same rank at (oh, ow), half-pixel-center sampling.
Tensor bilinear_resize(const Tensor& x, int oh, int ow);

// Nearest-neighbour resize, same rank contract as bilinear_resize.
Tensor nearest_resize(const Tensor& x, int oh, int ow);

// Mirror the last (width) axis.
Tensor flip_horizontal(const Tensor& x);

bool allclose(const Tensor& a, const Tensor& b, float atol, float rtol = 0.0f);
float max_abs_diff(const Tensor& a, const Tensor& b);
bool bit_equal(const Tensor& a, const Tensor& b);

} // namespace diffseg

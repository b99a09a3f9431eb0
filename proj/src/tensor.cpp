#include "diffseg/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace diffseg {

namespace {

int64_t product(const std::vector<int>& dims) {
    int64_t n = 1;
    for (int d : dims) {
        if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + shape_str(dims));
        n *= d;
    }
    return n;
}

} // namespace

Tensor::Tensor(std::vector<int> dims, float fill) : dims_(std::move(dims)) {
    if (dims_.empty() || dims_.size() > 4) throw ShapeError("tensor rank must be 1..4");
    data_.assign(static_cast<size_t>(product(dims_)), fill);
}

Tensor Tensor::from_data(std::vector<int> dims, std::vector<float> data) {
    Tensor t;
    if (dims.empty() || dims.size() > 4) throw ShapeError("tensor rank must be 1..4");
    if (product(dims) != static_cast<int64_t>(data.size()))
        throw ShapeError("data size does not match shape " + shape_str(dims));
    t.dims_ = std::move(dims);
    t.data_ = std::move(data);
    return t;
}

float& Tensor::at4(int n, int c, int h, int w) {
    assert(rank() == 4);
    return data_[static_cast<size_t>(((static_cast<int64_t>(n) * dims_[1] + c) * dims_[2] + h) * dims_[3] + w)];
}

float Tensor::at4(int n, int c, int h, int w) const {
    return const_cast<Tensor*>(this)->at4(n, c, h, w);
}

float& Tensor::at3(int c, int h, int w) {
    assert(rank() == 3);
    return data_[static_cast<size_t>((static_cast<int64_t>(c) * dims_[1] + h) * dims_[2] + w)];
}

float Tensor::at3(int c, int h, int w) const {
    return const_cast<Tensor*>(this)->at3(c, h, w);
}

std::string Tensor::shape_str() const { return diffseg::shape_str(dims_); }

Tensor Tensor::reshaped(std::vector<int> dims) const {
    if (product(dims) != numel())
        throw ShapeError("reshape " + diffseg::shape_str(dims_) + " -> " + diffseg::shape_str(dims) + " changes element count");
    Tensor t = *this;
    t.dims_ = std::move(dims);
    return t;
}

bool Tensor::all_finite() const {
    for (float v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

float Tensor::min() const {
    float m = std::numeric_limits<float>::infinity();
    for (float v : data_) m = std::min(m, v);
    return m;
}

float Tensor::max() const {
    float m = -std::numeric_limits<float>::infinity();
    for (float v : data_) m = std::max(m, v);
    return m;
}

double Tensor::sum() const {
    double s = 0.0;
    for (float v : data_) s += v;
    return s;
}

uint64_t Tensor::content_hash() const {
    uint64_t h = fnv1a64(dims_.data(), dims_.size() * sizeof(int));
    return fnv1a64(data_.data(), data_.size() * sizeof(float), h);
}

std::string shape_str(const std::vector<int>& dims) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
    os << "]";
    return os.str();
}

uint64_t fnv1a64(const void* bytes, size_t len, uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

// Shared 2-D resampling driver: treats input as [planes, H, W].
template <typename SampleFn>
Tensor resample(const Tensor& x, int oh, int ow, SampleFn&& sample) {
    if (x.rank() != 3 && x.rank() != 4) throw ShapeError("resize expects rank 3 or 4, got " + x.shape_str());
    if (oh <= 0 || ow <= 0) throw ParameterError("resize target must be positive");
    const int rank = x.rank();
    const int ih = x.dim(rank - 2), iw = x.dim(rank - 1);
    std::vector<int> odims = x.dims();
    odims[static_cast<size_t>(rank - 2)] = oh;
    odims[static_cast<size_t>(rank - 1)] = ow;
    Tensor y(odims);
    int64_t planes = x.numel() / (static_cast<int64_t>(ih) * iw);
    const float* src = x.data();
    float* dst = y.data();
    for (int64_t p = 0; p < planes; ++p)
        sample(src + p * ih * iw, dst + p * static_cast<int64_t>(oh) * ow, ih, iw, oh, ow);
    return y;
}

} // namespace

Tensor bilinear_resize(const Tensor& x, int oh, int ow) {
    return resample(x, oh, ow, [](const float* src, float* dst, int ih, int iw, int ohh, int oww) {
        const float sh = static_cast<float>(ih) / static_cast<float>(ohh);
        const float sw = static_cast<float>(iw) / static_cast<float>(oww);
        for (int y = 0; y < ohh; ++y) {
            float fy = (static_cast<float>(y) + 0.5f) * sh - 0.5f;
            fy = std::max(0.0f, std::min(fy, static_cast<float>(ih - 1)));
            int y0 = static_cast<int>(fy);
            int y1 = std::min(y0 + 1, ih - 1);
            float wy = fy - static_cast<float>(y0);
            for (int xo = 0; xo < oww; ++xo) {
                float fx = (static_cast<float>(xo) + 0.5f) * sw - 0.5f;
                fx = std::max(0.0f, std::min(fx, static_cast<float>(iw - 1)));
                int x0 = static_cast<int>(fx);
                int x1 = std::min(x0 + 1, iw - 1);
                float wx = fx - static_cast<float>(x0);
                float v00 = src[y0 * iw + x0], v01 = src[y0 * iw + x1];
                float v10 = src[y1 * iw + x0], v11 = src[y1 * iw + x1];
                dst[y * oww + xo] = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
            }
        }
    });
}

Tensor nearest_resize(const Tensor& x, int oh, int ow) {
    return resample(x, oh, ow, [](const float* src, float* dst, int ih, int iw, int ohh, int oww) {
        const float sh = static_cast<float>(ih) / static_cast<float>(ohh);
        const float sw = static_cast<float>(iw) / static_cast<float>(oww);
        for (int y = 0; y < ohh; ++y) {
            int sy = std::min(static_cast<int>((static_cast<float>(y) + 0.5f) * sh), ih - 1);
            for (int xo = 0; xo < oww; ++xo) {
                int sx = std::min(static_cast<int>((static_cast<float>(xo) + 0.5f) * sw), iw - 1);
                dst[y * oww + xo] = src[sy * iw + sx];
            }
        }
    });
}

Tensor flip_horizontal(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("flip_horizontal expects rank >= 2");
    Tensor y(x.dims());
    const int w = x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / w;
    const float* src = x.data();
    float* dst = y.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < w; ++c) dst[r * w + c] = src[r * w + (w - 1 - c)];
    return y;
}

bool allclose(const Tensor& a, const Tensor& b, float atol, float rtol) {
    if (!a.same_shape(b)) return false;
    for (int64_t i = 0; i < a.numel(); ++i) {
        float da = a[i], db = b[i];
        if (std::abs(da - db) > atol + rtol * std::abs(db)) return false;
    }
    return true;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    float m = 0.0f;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), static_cast<size_t>(a.numel()) * sizeof(float)) == 0;
}

} // namespace diffseg

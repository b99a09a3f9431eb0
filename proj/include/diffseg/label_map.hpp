#pragma once

#include <cstdint>
#include <vector>

#include "diffseg/errors.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

inline constexpr int kIgnoreIndex = 255;

// Integer per-pixel class map, [H,W] or [N,H,W].
struct LabelMap {
    std::vector<int> dims;
    std::vector<int32_t> data;

    LabelMap() = default;
    LabelMap(std::vector<int> d, int32_t fill = 0)
        : dims(std::move(d)) {
        int64_t n = 1;
        for (int v : dims) {
            if (v <= 0) throw ShapeError("label map dims must be positive");
            n *= v;
        }
        data.assign(static_cast<size_t>(n), fill);
    }

    int height() const { return dims[dims.size() - 2]; }
    int width() const { return dims[dims.size() - 1]; }
    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    int32_t& at(int h, int w) { return data[static_cast<size_t>(h) * width() + w]; }
    int32_t at(int h, int w) const { return data[static_cast<size_t>(h) * width() + w]; }

    LabelMap flipped_horizontal() const {
        LabelMap out = *this;
        const int w = width();
        const int64_t rows = numel() / w;
        for (int64_t r = 0; r < rows; ++r)
            for (int c = 0; c < w; ++c) out.data[r * w + c] = data[r * w + (w - 1 - c)];
        return out;
    }

    uint64_t content_hash() const {
        uint64_t h = fnv1a64(dims.data(), dims.size() * sizeof(int));
        return fnv1a64(data.data(), data.size() * sizeof(int32_t), h);
    }
};

} // namespace diffseg

#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "diffseg/tensor.hpp"

namespace diffseg {

inline constexpr uint32_t kArchiveMagic = 0x4b435344u; // "DSCK"
inline constexpr uint32_t kArchiveFormatVersion = 1;

// Single-file checkpoint container: a JSON metadata header plus named float
// tensors, little-endian throughout. Loading rejects unknown format versions.
struct Archive {
    std::string meta_json; // serialized JSON object
    std::vector<std::pair<std::string, Tensor>> tensors;

    void save(const std::string& path) const;
    static Archive load(const std::string& path);

    const Tensor& tensor(const std::string& name) const;
    bool has_tensor(const std::string& name) const;
};

} // namespace diffseg

#include "diffseg/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <memory>

namespace diffseg {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_bytes(std::FILE* f, const void* p, size_t n) {
    if (std::fwrite(p, 1, n, f) != n) throw IoError("short write");
}

void read_bytes(std::FILE* f, void* p, size_t n) {
    if (std::fread(p, 1, n, f) != n) throw FormatError("truncated archive");
}

template <typename T>
void write_pod(std::FILE* f, T v) {
    write_bytes(f, &v, sizeof(T));
}

template <typename T>
T read_pod(std::FILE* f) {
    T v;
    read_bytes(f, &v, sizeof(T));
    return v;
}

} // namespace

void Archive::save(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
        FilePtr f(std::fopen(tmp.c_str(), "wb"));
        if (!f) throw IoError("cannot open " + tmp + " for writing");
        write_pod<uint32_t>(f.get(), kArchiveMagic);
        write_pod<uint32_t>(f.get(), kArchiveFormatVersion);
        write_pod<uint64_t>(f.get(), meta_json.size());
        write_bytes(f.get(), meta_json.data(), meta_json.size());
        write_pod<uint32_t>(f.get(), static_cast<uint32_t>(tensors.size()));
        for (const auto& [name, t] : tensors) {
            write_pod<uint32_t>(f.get(), static_cast<uint32_t>(name.size()));
            write_bytes(f.get(), name.data(), name.size());
            write_pod<uint32_t>(f.get(), static_cast<uint32_t>(t.rank()));
            for (int d : t.dims()) write_pod<int32_t>(f.get(), d);
            write_pod<uint64_t>(f.get(), static_cast<uint64_t>(t.numel()));
            write_bytes(f.get(), t.data(), static_cast<size_t>(t.numel()) * sizeof(float));
        }
    }
    std::filesystem::rename(tmp, path);
}

Archive Archive::load(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("cannot open " + path);
    if (read_pod<uint32_t>(f.get()) != kArchiveMagic) throw FormatError(path + ": not a checkpoint archive");
    const uint32_t ver = read_pod<uint32_t>(f.get());
    if (ver != kArchiveFormatVersion)
        throw FormatError(path + ": unsupported format version " + std::to_string(ver) + " (expected " +
                          std::to_string(kArchiveFormatVersion) + ")");
    Archive a;
    const uint64_t jlen = read_pod<uint64_t>(f.get());
    if (jlen > (1ull << 30)) throw FormatError("implausible metadata size");
    a.meta_json.resize(jlen);
    read_bytes(f.get(), a.meta_json.data(), jlen);
    const uint32_t count = read_pod<uint32_t>(f.get());
    a.tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t nlen = read_pod<uint32_t>(f.get());
        std::string name(nlen, '\0');
        read_bytes(f.get(), name.data(), nlen);
        const uint32_t rank = read_pod<uint32_t>(f.get());
        if (rank == 0 || rank > 4) throw FormatError("bad tensor rank in archive");
        std::vector<int> dims(rank);
        for (uint32_t d = 0; d < rank; ++d) dims[d] = read_pod<int32_t>(f.get());
        const uint64_t numel = read_pod<uint64_t>(f.get());
        std::vector<float> data(numel);
        read_bytes(f.get(), data.data(), numel * sizeof(float));
        a.tensors.emplace_back(std::move(name), Tensor::from_data(std::move(dims), std::move(data)));
    }
    return a;
}

const Tensor& Archive::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw FormatError("archive missing tensor " + name);
}

bool Archive::has_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

} // namespace diffseg

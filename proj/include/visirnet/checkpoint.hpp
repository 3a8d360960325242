#pragma once

// Named-tensor checkpoint container. Layout (all integers little-endian):
//
//   bytes 0..7   magic "VISIRCKP"
//   u32          format version (currently 1)
//   u32          metadata length M, followed by M bytes of UTF-8 JSON
//   u32          tensor count T
//   T times:     u32 name length, name bytes,
//                u32 rank R, R x u64 dims,
//                prod(dims) x f64 values, row-major
//
// See docs/checkpoint_format.md.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "visirnet/errors.hpp"

namespace visirnet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'V', 'I', 'S', 'I', 'R', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<double> data;
};

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return &t;
        }
        return nullptr;
    }
};

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("truncated checkpoint: " + path);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, 8);
    detail::write_pod(os, kCheckpointVersion);
    const std::string meta = ck.meta.dump();
    detail::write_pod(os, static_cast<std::uint32_t>(meta.size()));
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    detail::write_pod(os, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& t : ck.tensors) {
        std::size_t count = 1;
        for (auto d : t.shape) count *= static_cast<std::size_t>(d);
        if (count != t.data.size()) throw ShapeMismatch("tensor '" + t.name + "' data does not match its shape");
        detail::write_pod(os, static_cast<std::uint32_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        detail::write_pod(os, static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) detail::write_pod(os, static_cast<std::uint64_t>(d));
        os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!os) throw IoError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw FormatError("not a checkpoint file (bad magic): " + path);
    }
    const auto version = detail::read_pod<std::uint32_t>(is, path);
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    }
    Checkpoint ck;
    const auto meta_len = detail::read_pod<std::uint32_t>(is, path);
    std::string meta(meta_len, '\0');
    if (!is.read(meta.data(), meta_len)) throw FormatError("truncated checkpoint metadata: " + path);
    try {
        ck.meta = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad checkpoint metadata in " + path + ": " + e.what());
    }
    const auto count = detail::read_pod<std::uint32_t>(is, path);
    ck.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const auto name_len = detail::read_pod<std::uint32_t>(is, path);
        t.name.resize(name_len);
        if (!is.read(t.name.data(), name_len)) throw FormatError("truncated tensor name: " + path);
        const auto rank = detail::read_pod<std::uint32_t>(is, path);
        std::size_t n = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            const auto d = detail::read_pod<std::uint64_t>(is, path);
            t.shape.push_back(static_cast<std::int64_t>(d));
            n *= d;
        }
        t.data.resize(n);
        if (!is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
            throw FormatError("truncated tensor data for '" + t.name + "': " + path);
        }
        ck.tensors.push_back(std::move(t));
    }
    return ck;
}

}  // namespace visirnet

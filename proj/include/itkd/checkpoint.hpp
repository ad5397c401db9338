#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "itkd/optim.hpp"

namespace itkd {

// Checkpoint layout (little-endian):
//   magic "ITKDCKPT" (8 bytes), version byte (1), u32 parameter count,
//   then per parameter: u32 id length, id bytes, u8 rank, i32 dims[rank],
//   f64 values (row-major).
inline constexpr char kCkptMagic[8] = {'I', 'T', 'K', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t kCkptVersion = 1;

namespace detail {

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T read_pod(std::istream& is, const char* what) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw IoError(msg("truncated checkpoint while reading ", what));
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, std::span<const Parameter> params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(msg("cannot open '", path, "' for writing"));
    os.write(kCkptMagic, sizeof kCkptMagic);
    detail::write_pod(os, kCkptVersion);
    detail::write_pod(os, std::uint32_t(params.size()));
    for (const auto& p : params) {
        detail::write_pod(os, std::uint32_t(p.id.size()));
        os.write(p.id.data(), std::streamsize(p.id.size()));
        detail::write_pod(os, std::uint8_t(p.tensor.rank()));
        for (int d : p.tensor.shape()) detail::write_pod(os, std::int32_t(d));
        auto vals = p.tensor.values();
        os.write(reinterpret_cast<const char*>(vals.data()),
                 std::streamsize(vals.size() * sizeof(double)));
    }
    if (!os) throw IoError(msg("write failure on '", path, "'"));
}

struct SavedTensor {
    Shape shape;
    std::vector<double> values;
};

inline std::map<std::string, SavedTensor> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(msg("cannot open checkpoint '", path, "'"));
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw IoError(msg("'", path, "' is not a checkpoint file (bad magic)"));
    auto version = detail::read_pod<std::uint8_t>(is, "version");
    if (version != kCkptVersion)
        throw IoError(msg("checkpoint version mismatch: file has ", int(version), ", expected ",
                          int(kCkptVersion)));
    auto count = detail::read_pod<std::uint32_t>(is, "parameter count");
    std::map<std::string, SavedTensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        auto id_len = detail::read_pod<std::uint32_t>(is, "id length");
        std::string id(id_len, '\0');
        is.read(id.data(), std::streamsize(id_len));
        if (!is) throw IoError("truncated checkpoint while reading id");
        auto rank = detail::read_pod<std::uint8_t>(is, "rank");
        Shape shape(rank);
        for (auto& d : shape) d = detail::read_pod<std::int32_t>(is, "dimension");
        std::vector<double> vals(std::size_t(numel(shape)));
        is.read(reinterpret_cast<char*>(vals.data()),
                std::streamsize(vals.size() * sizeof(double)));
        if (!is) throw IoError(msg("truncated checkpoint while reading values of '", id, "'"));
        out.emplace(std::move(id), SavedTensor{std::move(shape), std::move(vals)});
    }
    return out;
}

/// Copies saved values into an existing parameter set; every parameter must
/// be present with a matching shape.
inline void load_into(std::span<Parameter> params, const std::map<std::string, SavedTensor>& saved) {
    for (auto& p : params) {
        auto it = saved.find(p.id);
        if (it == saved.end()) throw IoError(msg("checkpoint is missing parameter '", p.id, "'"));
        if (it->second.shape != p.tensor.shape())
            throw IoError(msg("checkpoint shape mismatch for '", p.id, "': file ",
                              shape_str(it->second.shape), ", model ", shape_str(p.tensor.shape())));
        auto dst = p.tensor.raw_values();
        std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
    }
}

}  // namespace itkd

// SPDX-License-Identifier: Apache-2.0
//
// TSR1 container: magic "TSR1", u8 rank, rank x u32 little-endian extents,
// u8 dtype tag (0 = f32, 1 = f64), then the row-major payload, little-endian.
// Bit-exact round trips are part of the contract; truncated or corrupt files
// raise FormatError with the offending byte offset and never yield data.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "atrouslab/tensor.hpp"

namespace atrouslab {

static_assert(std::endian::native == std::endian::little,
              "TSR1 I/O assumes a little-endian host");

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() {
    return Dtype::F32;
}
template <>
constexpr Dtype dtype_of<double>() {
    return Dtype::F64;
}

inline constexpr char kTsrMagic[4] = {'T', 'S', 'R', '1'};

template <typename T>
void write_tsr(const std::filesystem::path& path, const Tensor<T>& t) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path.string());
    f.write(kTsrMagic, 4);
    const std::uint8_t rank = static_cast<std::uint8_t>(t.dim());
    f.put(static_cast<char>(rank));
    for (std::size_t e : t.shape()) {
        if (e > 0xffffffffull) throw FormatError("extent exceeds u32 in " + path.string());
        const std::uint32_t e32 = static_cast<std::uint32_t>(e);
        f.write(reinterpret_cast<const char*>(&e32), 4);
    }
    f.put(static_cast<char>(dtype_of<T>()));
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(T)));
    if (!f) throw FormatError("short write to " + path.string());
}

template <typename T>
Tensor<T> read_tsr(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open for reading: " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    std::size_t off = 0;
    auto need = [&](std::size_t n, const char* what) {
        if (off + n > bytes.size()) {
            throw FormatError(path.string() + ": truncated " + what + " at offset " + std::to_string(off));
        }
    };
    need(4, "magic");
    if (std::memcmp(bytes.data(), kTsrMagic, 4) != 0) {
        throw FormatError(path.string() + ": bad magic at offset 0");
    }
    off = 4;
    need(1, "rank");
    const std::uint8_t rank = static_cast<std::uint8_t>(bytes[off]);
    off += 1;
    Shape shape(rank);
    for (std::uint8_t d = 0; d < rank; ++d) {
        need(4, "extent");
        std::uint32_t e = 0;
        std::memcpy(&e, bytes.data() + off, 4);
        off += 4;
        shape[d] = e;
    }
    need(1, "dtype tag");
    const std::uint8_t tag = static_cast<std::uint8_t>(bytes[off]);
    off += 1;
    if (tag != static_cast<std::uint8_t>(dtype_of<T>())) {
        throw FormatError(path.string() + ": dtype tag " + std::to_string(tag) +
                          " does not match requested element type, offset " + std::to_string(off - 1));
    }
    const std::size_t n = shape_numel(shape);
    need(n * sizeof(T), "payload");
    if (off + n * sizeof(T) != bytes.size()) {
        throw FormatError(path.string() + ": trailing bytes after payload at offset " +
                          std::to_string(off + n * sizeof(T)));
    }
    std::vector<T> data(n);
    std::memcpy(data.data(), bytes.data() + off, n * sizeof(T));
    return Tensor<T>::from_data(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Named-parameter registries: every composed module flattens to a list of
// (name, tensor) pairs for checkpointing, counting and optimizer wiring.
// ---------------------------------------------------------------------------

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
std::size_t param_count(const ParamList<T>& params, bool trainable_only) {
    std::size_t n = 0;
    for (const auto& p : params) {
        if (!trainable_only || p.tensor.requires_grad()) n += p.tensor.numel();
    }
    return n;
}

}  // namespace atrouslab

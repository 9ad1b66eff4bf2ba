#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mscg/tensor.hpp"

namespace mscg {

// MTEN v1 tensor file: magic "MTEN", version 0x01, dtype byte, rank byte,
// rank little-endian u32 extents, row-major payload little-endian.
// dtype 0 = f32, 1 = u8, 2 = f64 (checkpoint entries only).
namespace mten {

static_assert(std::endian::native == std::endian::little, "MTEN writer assumes a little-endian host");

enum class Dtype : std::uint8_t { f32 = 0, u8 = 1, f64 = 2 };

inline void encode_header(std::vector<std::uint8_t>& out, Dtype dtype, const Shape& shape) {
    out.push_back('M');
    out.push_back('T');
    out.push_back('E');
    out.push_back('N');
    out.push_back(0x01);
    out.push_back(static_cast<std::uint8_t>(dtype));
    out.push_back(static_cast<std::uint8_t>(shape.size()));
    for (auto e : shape) {
        const auto u = static_cast<std::uint32_t>(e);
        out.push_back(static_cast<std::uint8_t>(u & 0xFF));
        out.push_back(static_cast<std::uint8_t>((u >> 8) & 0xFF));
        out.push_back(static_cast<std::uint8_t>((u >> 16) & 0xFF));
        out.push_back(static_cast<std::uint8_t>((u >> 24) & 0xFF));
    }
}

template <typename T>
std::vector<std::uint8_t> encode(const Tensor<T>& t) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    std::vector<std::uint8_t> out;
    const Dtype dt = std::is_same_v<T, float> ? Dtype::f32 : Dtype::f64;
    encode_header(out, dt, t.shape);
    const std::size_t n = t.data.size() * sizeof(T);
    const std::size_t base = out.size();
    out.resize(base + n);
    std::memcpy(out.data() + base, t.data.data(), n);
    return out;
}

// Values are rounded and clipped to [0, 255]; labels/masks store 0/1.
template <typename T>
std::vector<std::uint8_t> encode_u8(const Tensor<T>& t) {
    std::vector<std::uint8_t> out;
    encode_header(out, Dtype::u8, t.shape);
    out.reserve(out.size() + t.data.size());
    for (T v : t.data) {
        double d = std::llround(static_cast<double>(v));
        d = std::min(255.0, std::max(0.0, d));
        out.push_back(static_cast<std::uint8_t>(d));
    }
    return out;
}

struct Decoded {
    Dtype dtype;
    Shape shape;
    std::vector<std::uint8_t> payload; // raw little-endian bytes
};

inline Decoded decode(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    if (bytes.size() < 7 || bytes[0] != 'M' || bytes[1] != 'T' || bytes[2] != 'E' || bytes[3] != 'N') {
        throw data_error("not an MTEN file: " + origin);
    }
    if (bytes[4] != 0x01) throw data_error("unsupported MTEN version in " + origin);
    const auto dtype = static_cast<Dtype>(bytes[5]);
    if (dtype != Dtype::f32 && dtype != Dtype::u8 && dtype != Dtype::f64) {
        throw data_error("unsupported MTEN dtype in " + origin);
    }
    const std::size_t rank = bytes[6];
    std::size_t pos = 7;
    if (bytes.size() < pos + 4 * rank) throw data_error("truncated MTEN header in " + origin);
    Shape shape(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        std::uint32_t u = 0;
        u |= static_cast<std::uint32_t>(bytes[pos]);
        u |= static_cast<std::uint32_t>(bytes[pos + 1]) << 8;
        u |= static_cast<std::uint32_t>(bytes[pos + 2]) << 16;
        u |= static_cast<std::uint32_t>(bytes[pos + 3]) << 24;
        shape[i] = static_cast<std::int64_t>(u);
        pos += 4;
    }
    const std::size_t elem = dtype == Dtype::u8 ? 1 : (dtype == Dtype::f32 ? 4 : 8);
    const std::size_t want = static_cast<std::size_t>(shape_numel(shape)) * elem;
    if (bytes.size() != pos + want) throw data_error("MTEN payload size mismatch in " + origin);
    Decoded d;
    d.dtype = dtype;
    d.shape = std::move(shape);
    d.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
    return d;
}

// Decode into T; u8 payloads become their numeric values, floats convert.
template <typename T>
Tensor<T> to_tensor(const Decoded& d) {
    const std::int64_t n = shape_numel(d.shape);
    Tensor<T> t(d.shape);
    switch (d.dtype) {
        case Dtype::u8:
            for (std::int64_t i = 0; i < n; ++i) t.at(i) = static_cast<T>(d.payload[static_cast<std::size_t>(i)]);
            break;
        case Dtype::f32: {
            const float* p = reinterpret_cast<const float*>(d.payload.data());
            for (std::int64_t i = 0; i < n; ++i) t.at(i) = static_cast<T>(p[i]);
            break;
        }
        case Dtype::f64: {
            const double* p = reinterpret_cast<const double*>(d.payload.data());
            for (std::int64_t i = 0; i < n; ++i) t.at(i) = static_cast<T>(p[i]);
            break;
        }
    }
    return t;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot write file: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw data_error("short write: " + path);
}

template <typename T>
void save(const std::string& path, const Tensor<T>& t) {
    write_file(path, encode(t));
}

template <typename T>
void save_u8(const std::string& path, const Tensor<T>& t) {
    write_file(path, encode_u8(t));
}

template <typename T>
Tensor<T> load(const std::string& path) {
    return to_tensor<T>(decode(read_file(path), path));
}

inline Decoded load_raw(const std::string& path) { return decode(read_file(path), path); }

} // namespace mten
} // namespace mscg

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "relectra/errors.hpp"
#include "relectra/tensor.hpp"

namespace relectra {

// Checkpoint container format:
//   magic "RLCT", format version u32, record count u32;
//   record = name length u16, UTF-8 name, rank u8, dims u32 (little-endian),
//            payload as little-endian 32-bit floats.
// All multi-byte fields little-endian. Round-trips are bit-exact.

constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> values;

    std::size_t numel() const {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct ByteReader {
    const unsigned char* p;
    std::size_t n;
    std::size_t pos = 0;

    void need(std::size_t k) const {
        if (pos + k > n) throw DataError("checkpoint: truncated file");
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(p[pos] | (p[pos + 1] << 8));
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return p[pos++];
    }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str(std::size_t k) {
        need(k);
        std::string s(reinterpret_cast<const char*>(p + pos), k);
        pos += k;
        return s;
    }
};

}  // namespace detail

inline std::string serialize_records(const std::vector<TensorRecord>& records,
                                     std::uint32_t version = kCheckpointVersion) {
    std::string out;
    out += "RLCT";
    detail::put_u32(out, version);
    detail::put_u32(out, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        if (r.name.size() > 0xffff) throw ContractError("checkpoint: record name too long");
        if (r.dims.size() > 0xff) throw ContractError("checkpoint: rank exceeds u8");
        if (r.numel() != r.values.size()) {
            throw ShapeError("checkpoint: record '" + r.name + "' dims do not match payload size");
        }
        detail::put_u16(out, static_cast<std::uint16_t>(r.name.size()));
        out += r.name;
        out.push_back(static_cast<char>(r.dims.size()));
        for (auto d : r.dims) detail::put_u32(out, d);
        for (float v : r.values) detail::put_f32(out, v);
    }
    return out;
}

inline std::vector<TensorRecord> deserialize_records(const std::string& bytes) {
    detail::ByteReader rd{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()};
    if (rd.str(4) != "RLCT") throw DataError("checkpoint: bad magic, expected RLCT");
    std::uint32_t version = rd.u32();
    if (version != kCheckpointVersion) {
        throw DataError("checkpoint: unsupported format version " + std::to_string(version));
    }
    std::uint32_t count = rd.u32();
    std::vector<TensorRecord> records;
    records.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorRecord r;
        std::uint16_t name_len = rd.u16();
        r.name = rd.str(name_len);
        std::uint8_t rank = rd.u8();
        r.dims.resize(rank);
        for (auto& d : r.dims) d = rd.u32();
        r.values.resize(r.numel());
        for (auto& v : r.values) v = rd.f32();
        records.push_back(std::move(r));
    }
    if (rd.pos != rd.n) throw DataError("checkpoint: trailing bytes after last record");
    return records;
}

inline void write_checkpoint(const std::string& path, const std::vector<TensorRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("checkpoint: cannot open '" + path + "' for writing");
    std::string bytes = serialize_records(records);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("checkpoint: write failed for '" + path + "'");
}

inline std::vector<TensorRecord> read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_records(bytes);
}

template <typename Real>
TensorRecord to_record(const std::string& name, const Tensor<Real>& t) {
    TensorRecord r;
    r.name = name;
    r.dims.reserve(t.shape().size());
    for (auto d : t.shape()) r.dims.push_back(static_cast<std::uint32_t>(d));
    r.values.reserve(t.numel());
    for (Real v : t.data()) r.values.push_back(static_cast<float>(v));
    return r;
}

template <typename Real>
void load_into(const TensorRecord& r, Tensor<Real>& t) {
    if (r.numel() != t.numel()) {
        throw ShapeError("checkpoint: record '" + r.name + "' has " + std::to_string(r.numel()) +
                         " values, tensor expects " + std::to_string(t.numel()));
    }
    auto& d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<Real>(r.values[i]);
}

// u64 values are persisted as four exactly-representable u16 chunks each, so
// RNG state survives the float32 payload without bit hazards.
inline std::vector<float> pack_u64s(const std::vector<std::uint64_t>& vals) {
    std::vector<float> out;
    out.reserve(vals.size() * 4);
    for (auto v : vals) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<float>((v >> (16 * i)) & 0xffffULL));
    }
    return out;
}

inline std::vector<std::uint64_t> unpack_u64s(const std::vector<float>& vals) {
    if (vals.size() % 4 != 0) throw DataError("checkpoint: malformed packed u64 payload");
    std::vector<std::uint64_t> out;
    out.reserve(vals.size() / 4);
    for (std::size_t i = 0; i < vals.size(); i += 4) {
        std::uint64_t v = 0;
        for (int k = 0; k < 4; ++k) v |= static_cast<std::uint64_t>(static_cast<std::uint16_t>(vals[i + k])) << (16 * k);
        out.push_back(v);
    }
    return out;
}

}  // namespace relectra

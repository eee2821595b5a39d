// archive.hpp - the binary tensor container used by packages and caches
//
// Layout (all integers little-endian):
//   magic "TMPL" | format version u32 | tensor count u32
//   per tensor, in order: name (u16 length + UTF-8), rank u8, dims (u32 each),
//   dtype byte (0 = float32 LE)
//   then all payloads, in the same declaration order.
// save(load(x)) is the identity on bytes; names are unique.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "templet/errors.hpp"
#include "templet/tensor.hpp"

namespace templet {

constexpr uint32_t kArchiveVersion = 1;
constexpr uint8_t kDtypeFloat32 = 0;

// Ordered name -> tensor map; iteration order is declaration order.
using TensorMap = std::map<std::string, Tensor>;

namespace detail {

inline void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 8));
}

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::vector<uint8_t>& bytes;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > bytes.size()) throw ParseError("archive: truncated");
    }
    uint8_t u8() {
        need(1);
        return bytes[pos++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::string str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace detail

inline std::vector<uint8_t> archive_encode(const TensorMap& tensors) {
    std::vector<uint8_t> out = {'T', 'M', 'P', 'L'};
    detail::put_u32(out, kArchiveVersion);
    detail::put_u32(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff) throw ParseError("archive: tensor name too long");
        detail::put_u16(out, static_cast<uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(static_cast<uint8_t>(t.shape.size()));
        for (int d : t.shape) detail::put_u32(out, static_cast<uint32_t>(d));
        out.push_back(kDtypeFloat32);
    }
    for (const auto& [name, t] : tensors) {
        (void)name;
        size_t base = out.size();
        out.resize(base + t.data.size() * sizeof(float));
        // float32 values stored little-endian; matches the host layout here.
        std::memcpy(out.data() + base, t.data.data(), t.data.size() * sizeof(float));
    }
    return out;
}

inline TensorMap archive_decode(const std::vector<uint8_t>& bytes) {
    detail::Reader r{bytes};
    if (r.str(4) != "TMPL") throw ParseError("archive: bad magic");
    uint32_t version = r.u32();
    if (version != kArchiveVersion)
        throw VersionError("archive: unsupported format version " + std::to_string(version));
    uint32_t count = r.u32();
    std::vector<std::pair<std::string, std::vector<int>>> headers;
    headers.reserve(count);
    TensorMap tensors;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t name_len = r.u16();
        std::string name = r.str(name_len);
        uint8_t rank = r.u8();
        std::vector<int> dims(rank);
        for (uint8_t d = 0; d < rank; ++d) dims[d] = static_cast<int>(r.u32());
        uint8_t dtype = r.u8();
        if (dtype != kDtypeFloat32)
            throw ParseError("archive: unsupported dtype " + std::to_string(dtype));
        if (tensors.count(name)) throw ParseError("archive: duplicate tensor name " + name);
        tensors[name] = Tensor();  // reserve the key; filled below
        headers.emplace_back(std::move(name), std::move(dims));
    }
    for (auto& [name, dims] : headers) {
        size_t n = Tensor::numel_of(dims);
        r.need(n * sizeof(float));
        Tensor t;
        t.shape = dims;
        t.data.resize(n);
        std::memcpy(t.data.data(), bytes.data() + r.pos, n * sizeof(float));
        r.pos += n * sizeof(float);
        tensors[name] = std::move(t);
    }
    if (r.pos != bytes.size()) throw ParseError("archive: trailing bytes");
    return tensors;
}

inline void archive_save(const std::string& path, const TensorMap& tensors) {
    std::vector<uint8_t> bytes = archive_encode(tensors);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline TensorMap archive_load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return archive_decode(bytes);
}

}  // namespace templet

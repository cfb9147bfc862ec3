// SPDX-License-Identifier: Apache-2.0
//
// Named tensor archive (.nta): the one on-disk container used for datasets,
// checkpoints, sample batches and influence traces.
//
// Layout (all integers little-endian):
//   "NTAR"
//   u32 version (currently 1)
//   u32 entry count
//   per entry:
//     u32 name length, UTF-8 name bytes
//     u32 dtype (1 = f32, 2 = u8)
//     u32 rank
//     u64 dims[rank]
//     payload, row-major, prod(dims) * dtype_size bytes
//   u32 metadata length, UTF-8 key=value text ("k=v\n" lines)
//
// Round-trips are bit-exact: entry order and the raw metadata text are
// preserved verbatim.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace codiff::io {

enum class Dtype : uint32_t { f32 = 1, u8 = 2 };

inline size_t dtype_size(Dtype d) {
    switch (d) {
        case Dtype::f32: return 4;
        case Dtype::u8: return 1;
    }
    throw std::runtime_error("ntar: unknown dtype code");
}

struct ArchiveEntry {
    std::string name;
    Dtype dtype = Dtype::f32;
    std::vector<uint64_t> dims;
    std::vector<uint8_t> payload;  // raw little-endian bytes

    size_t count() const {
        size_t n = 1;
        for (uint64_t d : dims) n *= static_cast<size_t>(d);
        return n;
    }
};

class NamedTensorArchive {
public:
    std::vector<ArchiveEntry> entries;
    std::string metadata;  // raw key=value text, preserved verbatim

    bool has(const std::string& name) const { return find(name) != nullptr; }

    const ArchiveEntry& get(const std::string& name) const {
        if (const ArchiveEntry* e = find(name)) return *e;
        throw std::runtime_error("ntar: no entry named '" + name + "'");
    }

    void add_f32(const std::string& name, const std::vector<uint64_t>& dims,
                 const float* values, size_t n) {
        ArchiveEntry e;
        e.name = name;
        e.dtype = Dtype::f32;
        e.dims = dims;
        if (e.count() != n)
            throw std::invalid_argument("ntar: entry '" + name + "' dims/value count mismatch");
        e.payload.resize(n * 4);
        for (size_t i = 0; i < n; i++) put_f32(e.payload.data() + 4 * i, values[i]);
        push(std::move(e));
    }

    void add_tensor(const std::string& name, const Tensor& t) {
        std::vector<uint64_t> dims;
        for (int d : t.shape) dims.push_back(static_cast<uint64_t>(d));
        add_f32(name, dims, t.ptr(), t.numel());
    }

    void add_u8(const std::string& name, const std::vector<uint64_t>& dims,
                const std::vector<uint8_t>& bytes) {
        ArchiveEntry e;
        e.name = name;
        e.dtype = Dtype::u8;
        e.dims = dims;
        if (e.count() != bytes.size())
            throw std::invalid_argument("ntar: entry '" + name + "' dims/byte count mismatch");
        e.payload = bytes;
        push(std::move(e));
    }

    Tensor tensor(const std::string& name) const {
        const ArchiveEntry& e = get(name);
        if (e.dtype != Dtype::f32)
            throw std::runtime_error("ntar: entry '" + name + "' is not f32");
        Shape s;
        for (uint64_t d : e.dims) s.push_back(static_cast<int>(d));
        Tensor t = Tensor::zeros(s);
        for (size_t i = 0; i < t.numel(); i++) t.at(i) = get_f32(e.payload.data() + 4 * i);
        return t;
    }

    std::vector<uint8_t> bytes(const std::string& name) const {
        const ArchiveEntry& e = get(name);
        if (e.dtype != Dtype::u8)
            throw std::runtime_error("ntar: entry '" + name + "' is not u8");
        return e.payload;
    }

    // --- metadata helpers ------------------------------------------------

    void set_meta(const std::string& key, const std::string& value) {
        metadata += key + "=" + value + "\n";
    }

    std::string meta(const std::string& key, const std::string& fallback = "") const {
        size_t pos = 0;
        std::string found = fallback;
        while (pos < metadata.size()) {
            size_t eol = metadata.find('\n', pos);
            if (eol == std::string::npos) eol = metadata.size();
            size_t eq = metadata.find('=', pos);
            if (eq != std::string::npos && eq < eol && metadata.substr(pos, eq - pos) == key)
                found = metadata.substr(eq + 1, eol - eq - 1);  // last occurrence wins
            pos = eol + 1;
        }
        return found;
    }

    // --- serialization ---------------------------------------------------

    std::vector<uint8_t> serialize() const {
        std::vector<uint8_t> out;
        out.insert(out.end(), {'N', 'T', 'A', 'R'});
        put_u32v(out, 1);  // version
        put_u32v(out, static_cast<uint32_t>(entries.size()));
        for (const ArchiveEntry& e : entries) {
            put_u32v(out, static_cast<uint32_t>(e.name.size()));
            out.insert(out.end(), e.name.begin(), e.name.end());
            put_u32v(out, static_cast<uint32_t>(e.dtype));
            put_u32v(out, static_cast<uint32_t>(e.dims.size()));
            for (uint64_t d : e.dims) put_u64v(out, d);
            out.insert(out.end(), e.payload.begin(), e.payload.end());
        }
        put_u32v(out, static_cast<uint32_t>(metadata.size()));
        out.insert(out.end(), metadata.begin(), metadata.end());
        return out;
    }

    static NamedTensorArchive deserialize(const std::vector<uint8_t>& buf) {
        Cursor c{buf.data(), buf.size(), 0};
        if (c.size < 4 || std::memcmp(c.p, "NTAR", 4) != 0)
            throw std::runtime_error("ntar: bad magic");
        c.off = 4;
        uint32_t version = c.u32();
        if (version != 1)
            throw std::runtime_error("ntar: unsupported version " + std::to_string(version));
        uint32_t n = c.u32();
        NamedTensorArchive a;
        for (uint32_t i = 0; i < n; i++) {
            ArchiveEntry e;
            uint32_t name_len = c.u32();
            e.name = c.str(name_len);
            uint32_t dt = c.u32();
            if (dt != 1 && dt != 2)
                throw std::runtime_error("ntar: entry '" + e.name + "' has unknown dtype " +
                                         std::to_string(dt));
            e.dtype = static_cast<Dtype>(dt);
            uint32_t rank = c.u32();
            e.dims.resize(rank);
            for (uint32_t r = 0; r < rank; r++) e.dims[r] = c.u64();
            size_t bytes = e.count() * dtype_size(e.dtype);
            e.payload = c.raw(bytes);
            a.push(std::move(e));
        }
        uint32_t meta_len = c.u32();
        a.metadata = c.str(meta_len);
        if (c.off != c.size) throw std::runtime_error("ntar: trailing bytes after archive");
        return a;
    }

    void save(const std::string& path) const {
        std::vector<uint8_t> buf = serialize();
        std::ofstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("ntar: cannot open '" + path + "' for writing");
        f.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size()));
        if (!f) throw std::runtime_error("ntar: short write to '" + path + "'");
    }

    static NamedTensorArchive load(const std::string& path) {
        std::ifstream f(path, std::ios::binary | std::ios::ate);
        if (!f) throw std::runtime_error("ntar: cannot open '" + path + "'");
        std::streamsize sz = f.tellg();
        f.seekg(0);
        std::vector<uint8_t> buf(static_cast<size_t>(sz));
        if (sz > 0) f.read(reinterpret_cast<char*>(buf.data()), sz);
        if (!f) throw std::runtime_error("ntar: short read from '" + path + "'");
        return deserialize(buf);
    }

private:
    std::map<std::string, size_t> index_;

    const ArchiveEntry* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &entries[it->second];
    }

    void push(ArchiveEntry&& e) {
        if (index_.count(e.name))
            throw std::invalid_argument("ntar: duplicate entry name '" + e.name + "'");
        index_[e.name] = entries.size();
        entries.push_back(std::move(e));
    }

    static void put_f32(uint8_t* p, float v) {
        uint32_t u;
        std::memcpy(&u, &v, 4);
        p[0] = uint8_t(u);
        p[1] = uint8_t(u >> 8);
        p[2] = uint8_t(u >> 16);
        p[3] = uint8_t(u >> 24);
    }
    static float get_f32(const uint8_t* p) {
        uint32_t u = uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
                     uint32_t(p[3]) << 24;
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
    static void put_u32v(std::vector<uint8_t>& out, uint32_t v) {
        out.push_back(uint8_t(v));
        out.push_back(uint8_t(v >> 8));
        out.push_back(uint8_t(v >> 16));
        out.push_back(uint8_t(v >> 24));
    }
    static void put_u64v(std::vector<uint8_t>& out, uint64_t v) {
        for (int i = 0; i < 8; i++) out.push_back(uint8_t(v >> (8 * i)));
    }

    struct Cursor {
        const uint8_t* p;
        size_t size, off;
        void need(size_t n) const {
            if (off + n > size) throw std::runtime_error("ntar: truncated archive");
        }
        uint32_t u32() {
            need(4);
            uint32_t v = uint32_t(p[off]) | uint32_t(p[off + 1]) << 8 |
                         uint32_t(p[off + 2]) << 16 | uint32_t(p[off + 3]) << 24;
            off += 4;
            return v;
        }
        uint64_t u64() {
            need(8);
            uint64_t v = 0;
            for (int i = 0; i < 8; i++) v |= uint64_t(p[off + i]) << (8 * i);
            off += 8;
            return v;
        }
        std::string str(size_t n) {
            need(n);
            std::string s(reinterpret_cast<const char*>(p + off), n);
            off += n;
            return s;
        }
        std::vector<uint8_t> raw(size_t n) {
            need(n);
            std::vector<uint8_t> v(p + off, p + off + n);
            off += n;
            return v;
        }
    };
};

// FNV-1a 64-bit; used for checkpoint/config fingerprints everywhere.
inline uint64_t fnv1a64(const uint8_t* p, size_t n) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) {
    return fnv1a64(reinterpret_cast<const uint8_t*>(s.data()), s.size());
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; i--) {
        s[static_cast<size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

inline std::string file_hash_hex(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("hash: cannot open '" + path + "'");
    std::streamsize sz = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> buf(static_cast<size_t>(sz));
    if (sz > 0) f.read(reinterpret_cast<char*>(buf.data()), sz);
    return hex64(fnv1a64(buf.data(), buf.size()));
}

}  // namespace codiff::io

#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "tuni/errors.hpp"
#include "tuni/layers.hpp"

namespace tuni {

struct CheckpointError : IoError {
    enum class Code { BadMagic, BadCrc, BadVersion, MissingName, ExtraName, BadRecord };
    Code code;
    CheckpointError(Code c, const std::string& msg) : IoError(msg), code(c) {}
};

namespace detail {

inline const std::array<std::uint32_t, 256>& crc32_table() {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int j = 0; j < 8; ++j)
                c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    return table;
}

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
    std::uint32_t c = 0xFFFFFFFFu;
    const auto& t = crc32_table();
    for (std::size_t i = 0; i < n; ++i) c = t[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

inline void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
    buf.push_back(std::uint8_t(v));
    buf.push_back(std::uint8_t(v >> 8));
    buf.push_back(std::uint8_t(v >> 16));
    buf.push_back(std::uint8_t(v >> 24));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
           std::uint32_t(p[3]) << 24;
}

template <typename T> constexpr std::uint8_t dtype_code();
template <> constexpr std::uint8_t dtype_code<float>() { return 0; }
template <> constexpr std::uint8_t dtype_code<double>() { return 1; }

} // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout: "TUNI" | version u32 | count u32 | records | crc32 of all prior
/// bytes. Record: name_len u32 | name bytes | dtype u8 | rank u8 | dims
/// u32[rank] | little-endian payload.
template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const ParamRegistry<T>& reg) {
    std::vector<std::uint8_t> buf;
    buf.insert(buf.end(), {'T', 'U', 'N', 'I'});
    detail::put_u32(buf, kCheckpointVersion);
    detail::put_u32(buf, std::uint32_t(reg.size()));
    for (std::size_t i = 0; i < reg.size(); ++i) {
        const auto& [name, t] = reg.item(i);
        detail::put_u32(buf, std::uint32_t(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
        buf.push_back(detail::dtype_code<T>());
        buf.push_back(std::uint8_t(t.rank()));
        for (int d : t.shape) detail::put_u32(buf, std::uint32_t(d));
        const std::size_t off = buf.size();
        buf.resize(off + t.data.size() * sizeof(T));
        std::memcpy(buf.data() + off, t.data.data(), t.data.size() * sizeof(T));
    }
    detail::put_u32(buf, detail::crc32(buf.data(), buf.size()));
    return buf;
}

template <typename T>
void save_checkpoint(const std::string& path, const ParamRegistry<T>& reg) {
    const auto buf = serialize_checkpoint(reg);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint '" + path + "': cannot open for writing");
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
    if (!out) throw IoError("checkpoint '" + path + "': write failed");
}

enum class LoadMode {
    Strict,       // registry and file must carry exactly the same names/shapes
    EncoderPrefix // only records named "encoder.*" load; others ignored
};

template <typename T>
void load_checkpoint_bytes(const std::vector<std::uint8_t>& buf, ParamRegistry<T>& reg,
                           LoadMode mode) {
    using CE = CheckpointError;
    if (buf.size() < 16 || std::memcmp(buf.data(), "TUNI", 4) != 0)
        throw CE(CE::Code::BadMagic, "checkpoint: bad magic");
    const std::uint32_t stored_crc = detail::get_u32(buf.data() + buf.size() - 4);
    if (detail::crc32(buf.data(), buf.size() - 4) != stored_crc)
        throw CE(CE::Code::BadCrc, "checkpoint: CRC32 mismatch");
    const std::uint32_t version = detail::get_u32(buf.data() + 4);
    if (version != kCheckpointVersion)
        throw CE(CE::Code::BadVersion, "checkpoint: unknown version " + std::to_string(version));
    const std::uint32_t count = detail::get_u32(buf.data() + 8);

    std::size_t pos = 12;
    const std::size_t end = buf.size() - 4;
    auto need = [&](std::size_t n, const char* what) {
        if (pos + n > end)
            throw CE(CE::Code::BadRecord, std::string("checkpoint: truncated ") + what);
    };

    std::map<std::string, bool> loaded;
    for (std::uint32_t r = 0; r < count; ++r) {
        need(4, "name length");
        const std::uint32_t name_len = detail::get_u32(buf.data() + pos);
        pos += 4;
        need(name_len, "name");
        std::string name(reinterpret_cast<const char*>(buf.data() + pos), name_len);
        pos += name_len;
        need(2, "dtype/rank");
        const std::uint8_t dtype = buf[pos++];
        const std::uint8_t rank = buf[pos++];
        need(std::size_t(rank) * 4, "dims");
        Shape dims(rank);
        std::int64_t numel = 1;
        for (int d = 0; d < rank; ++d) {
            dims[std::size_t(d)] = int(detail::get_u32(buf.data() + pos));
            pos += 4;
            numel *= dims[std::size_t(d)];
        }
        const std::size_t elt =
            dtype == 0 ? sizeof(float) : dtype == 1 ? sizeof(double) : 0;
        if (elt == 0) throw CE(CE::Code::BadRecord, "checkpoint: unknown dtype code");
        need(std::size_t(numel) * elt, "payload");

        const bool wanted = mode == LoadMode::Strict || name.rfind("encoder.", 0) == 0;
        Tensor<T>* target = reg.find(name);
        if (!target) {
            if (mode == LoadMode::Strict)
                throw CE(CE::Code::ExtraName,
                         "checkpoint: record '" + name + "' not present in the model");
            pos += std::size_t(numel) * elt;
            continue;
        }
        if (!wanted) {
            pos += std::size_t(numel) * elt;
            continue;
        }
        if (target->shape != dims)
            throw CE(CE::Code::BadRecord, "checkpoint: shape mismatch for '" + name + "' (file " +
                                              shape_str(dims) + ", model " +
                                              shape_str(target->shape) + ")");
        if (dtype != detail::dtype_code<T>())
            throw CE(CE::Code::BadRecord, "checkpoint: dtype mismatch for '" + name + "'");
        std::memcpy(target->data.data(), buf.data() + pos, std::size_t(numel) * elt);
        pos += std::size_t(numel) * elt;
        loaded[name] = true;
    }
    if (pos != end)
        throw CE(CE::Code::BadRecord, "checkpoint: trailing bytes after records");

    if (mode == LoadMode::Strict) {
        for (std::size_t i = 0; i < reg.size(); ++i)
            if (!loaded.count(reg.item(i).first))
                throw CE(CE::Code::MissingName,
                         "checkpoint: model parameter '" + reg.item(i).first +
                             "' missing from file");
    }
}

template <typename T>
void load_checkpoint(const std::string& path, ParamRegistry<T>& reg, LoadMode mode) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint '" + path + "': cannot open for reading");
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
    load_checkpoint_bytes(buf, reg, mode);
}

} // namespace tuni

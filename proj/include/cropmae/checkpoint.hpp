#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cropmae/config.hpp"
#include "cropmae/error.hpp"
#include "cropmae/image.hpp"
#include "cropmae/tensor.hpp"

namespace cropmae::ckpt {

// File layout:
//   "CMAE" | u32 LE version | u32 LE header length | header text | payload
// Header lines:
//   step <n>
//   rng <algorithm> <seed> <counter>
//   config <key> = <value>
//   tensor <name>:<dtype>:<d0>x<d1>...:<payload offset>
// Payloads are raw little-endian element arrays; offsets are relative to
// the first payload byte.
inline constexpr char kMagic[4] = {'C', 'M', 'A', 'E'};
inline constexpr std::uint32_t kVersion = 1;

template <class T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

template <class T>
struct Checkpoint {
    std::uint64_t step = 0;
    std::string rng_algorithm;
    std::uint64_t rng_seed = 0;
    std::uint64_t rng_counter = 0;
    ConfigMap config;
    std::vector<NamedTensor<T>> tensors;

    const Tensor<T>* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t.tensor;
        return nullptr;
    }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
    std::uint8_t buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.insert(out.end(), buf, buf + sizeof(U));
}

inline Shape parse_shape(const std::string& s, std::size_t header_offset) {
    Shape shape;
    if (s.empty() || s == "scalar") return shape;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const auto x = s.find('x', pos);
        const auto part = s.substr(pos, x == std::string::npos ? std::string::npos : x - pos);
        try {
            std::size_t used = 0;
            shape.push_back(std::stoul(part, &used));
            if (used != part.size()) throw std::invalid_argument("");
        } catch (const std::exception&) {
            throw FormatError("bad shape '" + s + "' in header at byte offset " + std::to_string(header_offset));
        }
        if (x == std::string::npos) break;
        pos = x + 1;
    }
    return shape;
}

inline std::string shape_token(const Shape& shape) {
    if (shape.empty()) return "scalar";
    std::string s;
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
    return s;
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> encode(const Checkpoint<T>& ck) {
    std::ostringstream header;
    header << "step " << ck.step << "\n";
    header << "rng " << (ck.rng_algorithm.empty() ? "none" : ck.rng_algorithm) << " " << ck.rng_seed << " "
           << ck.rng_counter << "\n";
    for (const auto& [k, v] : ck.config.entries()) header << "config " << k << " = " << v << "\n";
    std::size_t offset = 0;
    for (const auto& nt : ck.tensors) {
        if (nt.name.find_first_of(": \n") != std::string::npos) throw FormatError("tensor name '" + nt.name + "' is not encodable");
        header << "tensor " << nt.name << ":" << dtype_name<T>() << ":" << detail::shape_token(nt.tensor.shape()) << ":"
               << offset << "\n";
        offset += nt.tensor.size() * sizeof(T);
    }
    const std::string h = header.str();
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    detail::put_u32(out, kVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(h.size()));
    out.insert(out.end(), h.begin(), h.end());
    out.reserve(out.size() + offset);
    for (const auto& nt : ck.tensors)
        for (T v : nt.tensor.data()) detail::put_le(out, v);
    return out;
}

template <class T>
Checkpoint<T> decode(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 12) throw FormatError("file too short for checkpoint preamble (offset " + std::to_string(bytes.size()) + ")");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic at offset 0");
    const std::uint32_t version = detail::get_u32(bytes.data() + 4);
    if (version != kVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " at offset 4 (expected " +
                          std::to_string(kVersion) + ")");
    }
    const std::uint32_t header_len = detail::get_u32(bytes.data() + 8);
    if (bytes.size() - 12 < header_len) {
        throw FormatError("header length " + std::to_string(header_len) + " at offset 8 runs past end of file (" +
                          std::to_string(bytes.size()) + " bytes)");
    }
    const std::string header(bytes.begin() + 12, bytes.begin() + 12 + header_len);
    const std::size_t payload_start = 12 + header_len;
    const std::size_t payload_size = bytes.size() - payload_start;

    Checkpoint<T> ck;
    struct Entry {
        std::string name, dtype;
        Shape shape;
        std::size_t offset;
    };
    std::vector<Entry> entries;
    std::istringstream in(header);
    std::string line;
    std::size_t line_offset = 12;
    while (std::getline(in, line)) {
        const std::size_t here = line_offset;
        line_offset += line.size() + 1;
        if (line.empty()) continue;
        const auto sp = line.find(' ');
        const std::string kind = line.substr(0, sp);
        const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
        auto bad = [&] { return FormatError("malformed header line '" + line + "' at offset " + std::to_string(here)); };
        if (kind == "step") {
            try {
                ck.step = std::stoull(rest);
            } catch (const std::exception&) {
                throw bad();
            }
        } else if (kind == "rng") {
            std::istringstream r(rest);
            if (!(r >> ck.rng_algorithm >> ck.rng_seed >> ck.rng_counter)) throw bad();
        } else if (kind == "config") {
            const auto eq = rest.find(" = ");
            if (eq == std::string::npos) throw bad();
            ck.config.set(rest.substr(0, eq), rest.substr(eq + 3));
        } else if (kind == "tensor") {
            Entry e;
            const auto c3 = rest.rfind(':');
            const auto c2 = c3 == std::string::npos ? c3 : rest.rfind(':', c3 - 1);
            const auto c1 = c2 == std::string::npos ? c2 : rest.rfind(':', c2 - 1);
            if (c1 == std::string::npos) throw bad();
            e.name = rest.substr(0, c1);
            e.dtype = rest.substr(c1 + 1, c2 - c1 - 1);
            e.shape = detail::parse_shape(rest.substr(c2 + 1, c3 - c2 - 1), here);
            try {
                e.offset = std::stoull(rest.substr(c3 + 1));
            } catch (const std::exception&) {
                throw bad();
            }
            entries.push_back(std::move(e));
        } else {
            throw bad();
        }
    }

    std::size_t expected_end = 0;
    for (const auto& e : entries) {
        std::size_t elem = 0;
        if (e.dtype == "f32") elem = 4;
        else if (e.dtype == "f64") elem = 8;
        else throw FormatError("unknown dtype '" + e.dtype + "' for tensor " + e.name);
        const std::size_t n = shape_numel(e.shape);
        if (e.offset + n * elem > payload_size) {
            throw FormatError("tensor " + e.name + " payload [" + std::to_string(payload_start + e.offset) + ", " +
                              std::to_string(payload_start + e.offset + n * elem) + ") runs past end of file at offset " +
                              std::to_string(bytes.size()));
        }
        expected_end = std::max(expected_end, e.offset + n * elem);
        std::vector<T> data(n);
        const std::uint8_t* src = bytes.data() + payload_start + e.offset;
        for (std::size_t i = 0; i < n; ++i) {
            if (elem == 4) {
                float f;
                std::memcpy(&f, src + 4 * i, 4);
                data[i] = static_cast<T>(f);
            } else {
                double d;
                std::memcpy(&d, src + 8 * i, 8);
                data[i] = static_cast<T>(d);
            }
        }
        ck.tensors.push_back({e.name, Tensor<T>(e.shape, std::move(data))});
    }
    if (expected_end != payload_size) {
        throw FormatError("payload length mismatch: header describes " + std::to_string(expected_end) + " bytes, file has " +
                          std::to_string(payload_size) + " after offset " + std::to_string(payload_start));
    }
    return ck;
}

template <class T>
void save(const Checkpoint<T>& ck, const std::filesystem::path& path) {
    const auto bytes = encode(ck);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    cropmae::detail::write_file_bytes(tmp, bytes);
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

template <class T>
Checkpoint<T> load(const std::filesystem::path& path) {
    try {
        return decode<T>(cropmae::detail::read_file_bytes(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace cropmae::ckpt

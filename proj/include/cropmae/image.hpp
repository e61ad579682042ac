#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "cropmae/error.hpp"

namespace cropmae {

/// RGB image, row-major HWC, values in [0, 1].
struct Image {
    static constexpr std::size_t channels = 3;

    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> values;

    Image() = default;
    Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), values(h * w * channels, fill) {}

    float& at(std::size_t y, std::size_t x, std::size_t c) { return values[(y * width + x) * channels + c]; }
    float at(std::size_t y, std::size_t x, std::size_t c) const { return values[(y * width + x) * channels + c]; }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Single-channel 8-bit map; used for instance masks (value = instance id) and gray exports.
struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> values;

    LabelMap() = default;
    LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), values(h * w, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }

    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

namespace detail {

struct PnmHeader {
    std::string magic;
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t maxval = 0;
    std::size_t payload_offset = 0;
};

inline PnmHeader parse_pnm_header(const std::vector<std::uint8_t>& bytes) {
    PnmHeader h;
    std::size_t pos = 0;
    auto fail = [&](const std::string& what) -> void {
        throw ParseError(what + " at byte offset " + std::to_string(pos));
    };
    if (bytes.size() < 2) fail("missing magic number");
    h.magic.assign(bytes.begin(), bytes.begin() + 2);
    pos = 2;
    auto skip_space_and_comments = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_number = [&](const char* what) {
        skip_space_and_comments();
        if (pos >= bytes.size() || !std::isdigit(bytes[pos])) fail(std::string("expected ") + what);
        std::size_t v = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
            if (v > (1u << 24)) fail(std::string(what) + " too large");
            ++pos;
        }
        return v;
    };
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) fail("expected whitespace after magic");
    h.width = read_number("width");
    h.height = read_number("height");
    h.maxval = read_number("maxval");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) fail("expected single whitespace before payload");
    ++pos;
    h.payload_offset = pos;
    if (h.width == 0 || h.height == 0) {
        pos = 2;
        fail("zero image extent");
    }
    return h;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

inline std::uint8_t quantize(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

inline Image decode_ppm(const std::vector<std::uint8_t>& bytes) {
    const auto h = detail::parse_pnm_header(bytes);
    if (h.magic != "P6") {
        throw ParseError("unsupported magic '" + h.magic + "' for color image (need P6) at byte offset 0");
    }
    if (h.maxval != 255) throw ParseError("unsupported maxval " + std::to_string(h.maxval) + " (need 255)");
    const std::size_t need = h.width * h.height * 3;
    if (bytes.size() - h.payload_offset < need) {
        throw ParseError("truncated payload: expected " + std::to_string(need) + " bytes at byte offset " +
                         std::to_string(h.payload_offset) + ", file ends at byte offset " + std::to_string(bytes.size()));
    }
    Image img(h.height, h.width);
    for (std::size_t i = 0; i < need; ++i) img.values[i] = static_cast<float>(bytes[h.payload_offset + i]) / 255.0f;
    return img;
}

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
    const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.reserve(bytes.size() + img.values.size());
    for (float v : img.values) bytes.push_back(detail::quantize(v));
    return bytes;
}

inline Image load_ppm(const std::filesystem::path& path) {
    try {
        return decode_ppm(detail::read_file_bytes(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

inline void save_ppm(const Image& img, const std::filesystem::path& path) {
    detail::write_file_bytes(path, encode_ppm(img));
}

inline LabelMap decode_pgm(const std::vector<std::uint8_t>& bytes) {
    const auto h = detail::parse_pnm_header(bytes);
    if (h.magic != "P5") throw ParseError("unsupported magic '" + h.magic + "' for label map (need P5) at byte offset 0");
    if (h.maxval == 0 || h.maxval > 255) throw ParseError("unsupported maxval " + std::to_string(h.maxval));
    const std::size_t need = h.width * h.height;
    if (bytes.size() - h.payload_offset < need) {
        throw ParseError("truncated payload: expected " + std::to_string(need) + " bytes at byte offset " +
                         std::to_string(h.payload_offset));
    }
    LabelMap m(h.height, h.width);
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(h.payload_offset), need, m.values.begin());
    return m;
}

inline std::vector<std::uint8_t> encode_pgm(const LabelMap& m) {
    const std::string header = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.insert(bytes.end(), m.values.begin(), m.values.end());
    return bytes;
}

inline LabelMap load_pgm(const std::filesystem::path& path) {
    try {
        return decode_pgm(detail::read_file_bytes(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

inline void save_pgm(const LabelMap& m, const std::filesystem::path& path) {
    detail::write_file_bytes(path, encode_pgm(m));
}

// Replicates a [0,1] intensity field into a gray P6-compatible image.
inline Image gray_to_rgb(const std::vector<float>& intensity, std::size_t h, std::size_t w) {
    Image img(h, w);
    for (std::size_t i = 0; i < h * w; ++i)
        for (std::size_t c = 0; c < 3; ++c) img.values[i * 3 + c] = std::clamp(intensity[i], 0.0f, 1.0f);
    return img;
}

}  // namespace cropmae

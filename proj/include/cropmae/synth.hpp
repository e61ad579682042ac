#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "cropmae/error.hpp"
#include "cropmae/image.hpp"
#include "cropmae/rng.hpp"

namespace cropmae::synth {

struct Keypoint {
    int id = 0;
    double x = 0, y = 0;
};

/// One moving object. Position at frame t is (x0 + vx*t, y0 + vy*t) (top-left).
struct Track {
    std::uint8_t id = 0;
    bool ellipse = false;
    long x0 = 0, y0 = 0, w = 0, h = 0;
    long vx = 0, vy = 0;
    std::array<float, 3> color{};
    double stripe_period = 4;
    double stripe_angle = 0;

    bool covers_local(long lx, long ly) const {
        if (lx < 0 || ly < 0 || lx >= w || ly >= h) return false;
        if (!ellipse) return true;
        const double rx = 0.5 * static_cast<double>(w), ry = 0.5 * static_cast<double>(h);
        const double dx = (static_cast<double>(lx) + 0.5 - rx) / rx;
        const double dy = (static_cast<double>(ly) + 0.5 - ry) / ry;
        return dx * dx + dy * dy <= 1.0;
    }
};

struct Sequence {
    std::vector<Image> frames;
    std::vector<LabelMap> masks;
    std::vector<std::vector<Keypoint>> keypoints;
    std::vector<Track> tracks;
};

struct SynthConfig {
    std::size_t count = 200;
    std::size_t size = 64;
    std::size_t frames = 8;
};

/// 1-3 textured shapes translating at constant integer velocity over a
/// static two-grating background. Each object lives in its own horizontal
/// band, so instance masks never overlap and stay fully inside the frame.
inline Sequence render_sequence(Rng& rng, std::size_t size, std::size_t n_frames) {
    if (size < 16) throw ParameterError("synthetic frames must be at least 16 pixels");
    if (n_frames < 1) throw ParameterError("need at least one frame");
    const long S = static_cast<long>(size);
    const long F = static_cast<long>(n_frames);
    Sequence seq;

    // Background: base colour plus two oriented sinusoidal gratings.
    std::array<float, 3> base{};
    for (auto& c : base) c = static_cast<float>(rng.uniform(0.25, 0.75));
    struct Grating {
        double kx, ky, phase, amp;
        std::array<double, 3> tint;
    };
    std::array<Grating, 2> gratings{};
    for (auto& g : gratings) {
        const double period = rng.uniform(10.0, 24.0);
        const double theta = rng.uniform(0.0, std::numbers::pi);
        g.kx = 2 * std::numbers::pi / period * std::cos(theta);
        g.ky = 2 * std::numbers::pi / period * std::sin(theta);
        g.phase = rng.uniform(0.0, 2 * std::numbers::pi);
        g.amp = rng.uniform(0.08, 0.18);
        for (auto& t : g.tint) t = rng.uniform(0.4, 1.0);
    }

    const long k_objects = rng.range(1, 3);
    const long band_h = S / k_objects;
    const long min_side = std::max<long>(4, S / 10);
    for (long k = 0; k < k_objects; ++k) {
        Track t;
        t.id = static_cast<std::uint8_t>(k + 1);
        t.ellipse = rng.bernoulli(0.5);
        t.vy = rng.range(-1, 1);
        if (band_h - std::abs(t.vy) * (F - 1) < min_side) t.vy = 0;
        const long max_h = std::max(min_side, std::min(band_h - std::abs(t.vy) * (F - 1), S / 3));
        t.h = rng.range(min_side, std::min(max_h, band_h));
        t.vx = rng.range(-2, 2);
        const long max_w = S / 3;
        t.w = rng.range(std::max<long>(4, S / 8), max_w);
        if (t.w + std::abs(t.vx) * (F - 1) > S) t.vx = 0;
        const long x_span = S - t.w - std::abs(t.vx) * (F - 1);
        const long y_span = band_h - t.h - std::abs(t.vy) * (F - 1);
        const long x_start = rng.range(0, std::max<long>(0, x_span));
        const long y_start = rng.range(0, std::max<long>(0, y_span));
        t.x0 = t.vx >= 0 ? x_start : x_start + std::abs(t.vx) * (F - 1);
        t.y0 = k * band_h + (t.vy >= 0 ? y_start : y_start + std::abs(t.vy) * (F - 1));
        for (auto& c : t.color) c = static_cast<float>(rng.uniform(0.0, 1.0));
        t.stripe_period = rng.uniform(3.0, 7.0);
        t.stripe_angle = rng.uniform(0.0, std::numbers::pi);
        seq.tracks.push_back(t);
    }

    for (long f = 0; f < F; ++f) {
        Image img(size, size);
        LabelMap mask(size, size);
        for (long y = 0; y < S; ++y)
            for (long x = 0; x < S; ++x)
                for (std::size_t c = 0; c < 3; ++c) {
                    double v = base[c];
                    for (const auto& g : gratings) v += g.amp * g.tint[c] * std::sin(g.kx * x + g.ky * y + g.phase);
                    img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
        std::vector<Keypoint> kps;
        for (const auto& t : seq.tracks) {
            const long ox = t.x0 + t.vx * f, oy = t.y0 + t.vy * f;
            const double ca = std::cos(t.stripe_angle), sa = std::sin(t.stripe_angle);
            for (long ly = 0; ly < t.h; ++ly)
                for (long lx = 0; lx < t.w; ++lx) {
                    if (!t.covers_local(lx, ly)) continue;
                    const auto px = static_cast<std::size_t>(ox + lx), py = static_cast<std::size_t>(oy + ly);
                    const double stripe = std::sin(2 * std::numbers::pi * (lx * ca + ly * sa) / t.stripe_period) > 0 ? 0.12 : -0.12;
                    for (std::size_t c = 0; c < 3; ++c) {
                        img.at(py, px, c) = static_cast<float>(std::clamp(t.color[c] + stripe, 0.0, 1.0));
                    }
                    mask.at(py, px) = t.id;
                }
            kps.push_back({t.id, static_cast<double>(ox) + 0.5 * static_cast<double>(t.w - 1),
                           static_cast<double>(oy) + 0.5 * static_cast<double>(t.h - 1)});
        }
        seq.frames.push_back(std::move(img));
        seq.masks.push_back(std::move(mask));
        seq.keypoints.push_back(std::move(kps));
    }
    return seq;
}

inline std::filesystem::path sequence_dir(const std::filesystem::path& root, std::size_t seq) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "seq_%04zu", seq);
    return root / buf;
}

inline std::string frame_name(const char* stem, std::size_t frame, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%05zu.%s", stem, frame, ext);
    return buf;
}

inline void save_keypoints(const std::vector<Keypoint>& kps, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& k : kps) {
        char line[96];
        std::snprintf(line, sizeof line, "%d %.2f %.2f\n", k.id, k.x, k.y);
        out << line;
    }
    if (!out) throw IoError("short write to " + path.string());
}

inline std::vector<Keypoint> load_keypoints(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<Keypoint> kps;
    Keypoint k;
    while (in >> k.id >> k.x >> k.y) kps.push_back(k);
    if (!in.eof()) throw ParseError("malformed keypoint line in " + path.string());
    return kps;
}

/// Write `cfg.count` sequences under out_dir as seq_%04d/{frame,mask,kp}_%05d.*
/// Sequence i draws from rng.derive(i), so output depends only on the seed.
inline std::size_t synth_moving_shapes(const Rng& rng, const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    if (cfg.count < 1) throw ParameterError("count must be at least 1");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    for (std::size_t s = 0; s < cfg.count; ++s) {
        Rng seq_rng = rng.derive(s);
        const Sequence seq = render_sequence(seq_rng, cfg.size, cfg.frames);
        const auto dir = sequence_dir(out_dir, s);
        std::filesystem::create_directories(dir, ec);
        if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
        for (std::size_t f = 0; f < seq.frames.size(); ++f) {
            save_ppm(seq.frames[f], dir / frame_name("frame", f, "ppm"));
            save_pgm(seq.masks[f], dir / frame_name("mask", f, "pgm"));
            save_keypoints(seq.keypoints[f], dir / frame_name("kp", f, "txt"));
        }
    }
    return cfg.count;
}

}  // namespace cropmae::synth

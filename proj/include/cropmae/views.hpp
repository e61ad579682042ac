#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cropmae/error.hpp"
#include "cropmae/image.hpp"
#include "cropmae/rng.hpp"

namespace cropmae::views {

struct CropRect {
    long x = 0, y = 0, w = 0, h = 0;

    long area() const { return w * h; }

    bool inside(long src_w, long src_h) const {
        return w >= 1 && h >= 1 && x >= 0 && y >= 0 && x + w <= src_w && y + h <= src_h;
    }

    bool contains(const CropRect& o) const {
        return o.x >= x && o.y >= y && o.x + o.w <= x + w && o.y + o.h <= y + h;
    }

    friend bool operator==(const CropRect&, const CropRect&) = default;
};

enum class Strategy { Same, Random, LocalToGlobal, GlobalToLocal, FramePair };

inline std::string_view to_string(Strategy s) {
    switch (s) {
        case Strategy::Same: return "same";
        case Strategy::Random: return "random";
        case Strategy::LocalToGlobal: return "local-to-global";
        case Strategy::GlobalToLocal: return "global-to-local";
        case Strategy::FramePair: return "frame-pair";
    }
    return "?";
}

inline Strategy parse_strategy(std::string_view s) {
    for (auto v : {Strategy::Same, Strategy::Random, Strategy::LocalToGlobal, Strategy::GlobalToLocal, Strategy::FramePair}) {
        if (to_string(v) == s) return v;
    }
    throw ConfigError("unknown strategy '" + std::string(s) + "'");
}

struct Range {
    double lo = 0, hi = 0;
};

struct ColorJitter {
    double brightness = 0, contrast = 0, saturation = 0;

    bool active() const { return brightness > 0 || contrast > 0 || saturation > 0; }
};

/// Augmentation settings. V2 area bounds are relative to the region V2 is
/// cut from.
struct AugmentConfig {
    Range area_v1{0.10, 1.0};
    Range area_v2{0.30, 0.60};
    Range aspect{3.0 / 4.0, 4.0 / 3.0};
    double hflip_p = 0.5;
    ColorJitter jitter{};
    Range blur_sigma{0.0, 0.0};
    std::size_t output_size = 64;

    void validate() const {
        auto check_area = [](const Range& r, const char* name) {
            if (!(r.lo > 0 && r.lo <= r.hi && r.hi <= 1)) throw ParameterError(std::string(name) + " must satisfy 0 < lo <= hi <= 1");
        };
        check_area(area_v1, "area_v1");
        check_area(area_v2, "area_v2");
        if (!(aspect.lo > 0 && aspect.lo <= aspect.hi)) throw ParameterError("aspect bounds must be positive and ordered");
        if (!(hflip_p >= 0 && hflip_p <= 1)) throw ParameterError("hflip_p must lie in [0, 1]");
        if (jitter.brightness < 0 || jitter.contrast < 0 || jitter.saturation < 0) throw ParameterError("jitter strengths must be nonnegative");
        if (blur_sigma.lo < 0 || blur_sigma.hi < blur_sigma.lo) throw ParameterError("blur sigma range invalid");
        if (output_size == 0) throw ParameterError("output_size must be positive");
    }
};

struct ViewPair {
    Image v1;  // context, unmasked
    Image v2;  // target, masked
    CropRect rect1, rect2;
    bool flip1 = false, flip2 = false;
    Strategy strategy = Strategy::GlobalToLocal;
};

/// Random-resized-crop geometry.
///
/// Target area is uniform in area_range * src_area and the aspect ratio is
/// log-uniform. Extents are floored so the area never exceeds the upper
/// bound. After 10 failed attempts, falls back to a centered crop at the
/// largest size that respects the aspect bounds and the upper area bound.
inline CropRect sample_crop_rect(Rng& rng, long src_h, long src_w, Range area_range, Range aspect_range) {
    if (src_h < 1 || src_w < 1) throw ParameterError("empty source region");
    const double area = static_cast<double>(src_h) * static_cast<double>(src_w);
    const double log_lo = std::log(aspect_range.lo), log_hi = std::log(aspect_range.hi);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * rng.uniform(area_range.lo, area_range.hi);
        const double ar = std::exp(rng.uniform(log_lo, log_hi));
        const long w = static_cast<long>(std::floor(std::sqrt(target * ar) + 1e-9));
        const long h = static_cast<long>(std::floor(std::sqrt(target / ar) + 1e-9));
        if (w >= 1 && h >= 1 && w <= src_w && h <= src_h) {
            const long y = rng.range(0, src_h - h);
            const long x = rng.range(0, src_w - w);
            return {x, y, w, h};
        }
    }
    const double in_ratio = static_cast<double>(src_w) / static_cast<double>(src_h);
    const double ar = std::clamp(in_ratio, aspect_range.lo, aspect_range.hi);
    double w = std::sqrt(area * area_range.hi * ar);
    double h = std::sqrt(area * area_range.hi / ar);
    const double shrink = std::min({1.0, static_cast<double>(src_w) / w, static_cast<double>(src_h) / h});
    w *= shrink;
    h *= shrink;
    const long wi = std::clamp(static_cast<long>(std::floor(w + 1e-9)), 1L, src_w);
    const long hi = std::clamp(static_cast<long>(std::floor(h + 1e-9)), 1L, src_h);
    return {(src_w - wi) / 2, (src_h - hi) / 2, wi, hi};
}

/// Crop `rect` out of `image` and resample to out_h x out_w (bilinear, half-pixel centers).
inline Image resize_bilinear(const Image& image, const CropRect& rect, std::size_t out_h, std::size_t out_w) {
    if (out_h == 0 || out_w == 0 || !rect.inside(static_cast<long>(image.width), static_cast<long>(image.height))) {
        throw ParameterError("degenerate crop or output size");
    }
    struct Tap {
        long i0, i1;
        float w1;
    };
    auto taps = [](long extent, std::size_t out) {
        std::vector<Tap> t(out);
        const double scale = static_cast<double>(extent) / static_cast<double>(out);
        for (std::size_t o = 0; o < out; ++o) {
            double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
            s = std::max(s, 0.0);
            long i0 = static_cast<long>(std::floor(s));
            i0 = std::min(i0, extent - 1);
            const long i1 = std::min(i0 + 1, extent - 1);
            t[o] = {i0, i1, static_cast<float>(s - static_cast<double>(i0))};
        }
        return t;
    };
    const auto ty = taps(rect.h, out_h);
    const auto tx = taps(rect.w, out_w);
    Image out(out_h, out_w);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        const auto& a = ty[oy];
        const std::size_t y0 = static_cast<std::size_t>(rect.y + a.i0), y1 = static_cast<std::size_t>(rect.y + a.i1);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto& b = tx[ox];
            const std::size_t x0 = static_cast<std::size_t>(rect.x + b.i0), x1 = static_cast<std::size_t>(rect.x + b.i1);
            for (std::size_t c = 0; c < 3; ++c) {
                const float top = image.at(y0, x0, c) * (1 - b.w1) + image.at(y0, x1, c) * b.w1;
                const float bot = image.at(y1, x0, c) * (1 - b.w1) + image.at(y1, x1, c) * b.w1;
                out.at(oy, ox, c) = std::clamp(top * (1 - a.w1) + bot * a.w1, 0.0f, 1.0f);
            }
        }
    }
    return out;
}

inline Image hflip(const Image& image) {
    Image out(image.height, image.width);
    for (std::size_t y = 0; y < image.height; ++y)
        for (std::size_t x = 0; x < image.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) out.at(y, image.width - 1 - x, c) = image.at(y, x, c);
    return out;
}

/// Multiplicative brightness, contrast and saturation jitter, each factor
/// drawn from [1 - s, 1 + s]; a zero strength skips that transform.
inline Image color_jitter(const Image& image, Rng& rng, const ColorJitter& s) {
    Image out = image;
    auto clamp01 = [](float v) { return std::clamp(v, 0.0f, 1.0f); };
    auto gray = [](const float* p) { return 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2]; };
    const std::size_t n = image.height * image.width;
    if (s.brightness > 0) {
        const auto f = static_cast<float>(rng.uniform(std::max(0.0, 1 - s.brightness), 1 + s.brightness));
        for (auto& v : out.values) v = clamp01(v * f);
    }
    if (s.contrast > 0) {
        const auto f = static_cast<float>(rng.uniform(std::max(0.0, 1 - s.contrast), 1 + s.contrast));
        double m = 0;
        for (std::size_t i = 0; i < n; ++i) m += gray(&out.values[i * 3]);
        const auto mean = static_cast<float>(m / static_cast<double>(n));
        for (auto& v : out.values) v = clamp01((v - mean) * f + mean);
    }
    if (s.saturation > 0) {
        const auto f = static_cast<float>(rng.uniform(std::max(0.0, 1 - s.saturation), 1 + s.saturation));
        for (std::size_t i = 0; i < n; ++i) {
            float* p = &out.values[i * 3];
            const float g = gray(p);
            for (int c = 0; c < 3; ++c) p[c] = clamp01(g + (p[c] - g) * f);
        }
    }
    return out;
}

/// Normalized 1-D Gaussian taps truncated at 3 sigma.
inline std::vector<float> gaussian_kernel(double sigma) {
    if (sigma <= 0) return {1.0f};
    const int radius = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double s = 0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        s += k[static_cast<std::size_t>(i + radius)];
    }
    std::vector<float> out(k.size());
    for (std::size_t i = 0; i < k.size(); ++i) out[i] = static_cast<float>(k[i] / s);
    return out;
}

inline Image gaussian_blur_sigma(const Image& image, double sigma) {
    if (sigma <= 0) return image;
    const auto k = gaussian_kernel(sigma);
    const long r = static_cast<long>(k.size() / 2);
    const long H = static_cast<long>(image.height), W = static_cast<long>(image.width);
    Image tmp(image.height, image.width), out(image.height, image.width);
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                float acc = 0;
                for (long i = -r; i <= r; ++i) {
                    const long xx = std::clamp(x + i, 0L, W - 1);
                    acc += k[static_cast<std::size_t>(i + r)] * image.at(static_cast<std::size_t>(y), static_cast<std::size_t>(xx), c);
                }
                tmp.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = acc;
            }
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                float acc = 0;
                for (long i = -r; i <= r; ++i) {
                    const long yy = std::clamp(y + i, 0L, H - 1);
                    acc += k[static_cast<std::size_t>(i + r)] * tmp.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(x), c);
                }
                out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = std::clamp(acc, 0.0f, 1.0f);
            }
    return out;
}

inline Image gaussian_blur(const Image& image, Rng& rng, Range sigma_range) {
    if (sigma_range.hi <= 0) return image;
    return gaussian_blur_sigma(image, rng.uniform(sigma_range.lo, sigma_range.hi));
}

namespace detail {

// Crop rect sampled inside `outer`, expressed in source coordinates.
inline CropRect sample_inner(Rng& rng, const CropRect& outer, Range area, Range aspect) {
    CropRect r = sample_crop_rect(rng, outer.h, outer.w, area, aspect);
    r.x += outer.x;
    r.y += outer.y;
    return r;
}

inline Image render_view(const Image& src, const CropRect& rect, bool flip, const AugmentConfig& cfg, Rng& rng) {
    Image v = resize_bilinear(src, rect, cfg.output_size, cfg.output_size);
    if (flip) v = hflip(v);
    if (cfg.jitter.active()) v = color_jitter(v, rng, cfg.jitter);
    if (cfg.blur_sigma.hi > 0) v = gaussian_blur(v, rng, cfg.blur_sigma);
    return v;
}

}  // namespace detail

/// Build a (V1, V2) pair from one image.
///
/// Same: one crop and flip shared by both views. Random: independent crops
/// (V1 area from area_v1, V2 from area_v2). LocalToGlobal: V2 is cut from the
/// image with area_v1 bounds and V1 is cut inside V2 with area_v2 bounds.
/// GlobalToLocal: V1 is cut from the image and V2 inside V1.
inline ViewPair generate_view_pair(const Image& image, Strategy strategy, const AugmentConfig& cfg, Rng& rng) {
    if (image.height < 2 || image.width < 2) throw ParameterError("source image must be at least 2x2");
    if (strategy == Strategy::FramePair) throw ParameterError("frame-pair views need two frames");
    cfg.validate();
    const long H = static_cast<long>(image.height), W = static_cast<long>(image.width);
    ViewPair p;
    p.strategy = strategy;
    switch (strategy) {
        case Strategy::Same:
            p.rect1 = sample_crop_rect(rng, H, W, cfg.area_v1, cfg.aspect);
            p.rect2 = p.rect1;
            break;
        case Strategy::Random:
            p.rect1 = sample_crop_rect(rng, H, W, cfg.area_v1, cfg.aspect);
            p.rect2 = sample_crop_rect(rng, H, W, cfg.area_v2, cfg.aspect);
            break;
        case Strategy::LocalToGlobal:
            p.rect2 = sample_crop_rect(rng, H, W, cfg.area_v1, cfg.aspect);
            p.rect1 = detail::sample_inner(rng, p.rect2, cfg.area_v2, cfg.aspect);
            break;
        case Strategy::GlobalToLocal:
            p.rect1 = sample_crop_rect(rng, H, W, cfg.area_v1, cfg.aspect);
            p.rect2 = detail::sample_inner(rng, p.rect1, cfg.area_v2, cfg.aspect);
            break;
        case Strategy::FramePair:
            break;
    }
    p.flip1 = rng.bernoulli(cfg.hflip_p);
    p.flip2 = strategy == Strategy::Same ? p.flip1 : rng.bernoulli(cfg.hflip_p);
    p.v1 = detail::render_view(image, p.rect1, p.flip1, cfg, rng);
    if (strategy == Strategy::Same) {
        p.v2 = p.v1;
    } else {
        p.v2 = detail::render_view(image, p.rect2, p.flip2, cfg, rng);
    }
    return p;
}

/// One crop/flip configuration (area_v1 bounds) applied to two frames.
inline ViewPair generate_view_pair_from_frames(const Image& frame_a, const Image& frame_b, const AugmentConfig& cfg, Rng& rng) {
    if (frame_a.height != frame_b.height || frame_a.width != frame_b.width) {
        throw ParameterError("frame sizes differ");
    }
    if (frame_a.height < 2 || frame_a.width < 2) throw ParameterError("frames must be at least 2x2");
    cfg.validate();
    ViewPair p;
    p.strategy = Strategy::FramePair;
    p.rect1 = sample_crop_rect(rng, static_cast<long>(frame_a.height), static_cast<long>(frame_a.width), cfg.area_v1, cfg.aspect);
    p.rect2 = p.rect1;
    p.flip1 = p.flip2 = rng.bernoulli(cfg.hflip_p);
    p.v1 = resize_bilinear(frame_a, p.rect1, cfg.output_size, cfg.output_size);
    p.v2 = resize_bilinear(frame_b, p.rect2, cfg.output_size, cfg.output_size);
    if (p.flip1) {
        p.v1 = hflip(p.v1);
        p.v2 = hflip(p.v2);
    }
    return p;
}

}  // namespace cropmae::views

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cropmae/error.hpp"
#include "cropmae/image.hpp"
#include "cropmae/model.hpp"

namespace cropmae::prop {

/// Per-location unit feature vectors on an h x w token grid.
struct FeatureGrid {
    std::size_t h = 0, w = 0, d = 0;
    std::vector<double> values;  // (y * w + x) * d + c

    const double* at(std::size_t loc) const { return values.data() + loc * d; }
    std::size_t locations() const { return h * w; }
};

/// Soft class scores per grid location.
struct LabelField {
    std::size_t h = 0, w = 0, k = 0;
    std::vector<double> scores;  // (y * w + x) * k + c

    LabelField() = default;
    LabelField(std::size_t h_, std::size_t w_, std::size_t k_) : h(h_), w(w_), k(k_), scores(h_ * w_ * k_, 0.0) {}

    double* at(std::size_t loc) { return scores.data() + loc * k; }
    const double* at(std::size_t loc) const { return scores.data() + loc * k; }
    std::size_t locations() const { return h * w; }

    // Lowest class index wins ties.
    std::size_t argmax(std::size_t loc) const {
        const double* s = at(loc);
        return static_cast<std::size_t>(std::max_element(s, s + k) - s);
    }
};

struct PropagationConfig {
    std::size_t top_k = 7;
    std::size_t queue_len = 20;
    std::size_t radius = 20;  // Chebyshev, in grid cells
    double temperature = 0.07;

    void validate() const {
        if (top_k < 1) throw ParameterError("top_k must be at least 1");
        if (!(temperature > 0)) throw ParameterError("temperature must be positive");
    }
};

// ---------------------------------------------------------------------------
// Features and label fields

inline FeatureGrid normalize_tokens(std::size_t h, std::size_t w, std::size_t d, std::vector<double> values) {
    FeatureGrid g{h, w, d, std::move(values)};
    for (std::size_t l = 0; l < h * w; ++l) {
        double* v = g.values.data() + l * d;
        double n = 0;
        for (std::size_t c = 0; c < d; ++c) n += v[c] * v[c];
        n = std::sqrt(n);
        if (n < 1e-12) {
            // Degenerate token: give it a fixed unit direction.
            std::fill(v, v + d, 0.0);
            v[0] = 1.0;
            continue;
        }
        for (std::size_t c = 0; c < d; ++c) v[c] /= n;
    }
    return g;
}

/// Last-layer patch tokens (no CLS) of a full, unmasked frame, L2-normalized.
template <class T>
FeatureGrid extract_feature_grid(const model::ModelParams<T>& params, const Image& frame) {
    const auto& cfg = params.config;
    if (frame.height != cfg.patch.image_size || frame.width != cfg.patch.image_size) {
        throw ParameterError("frame " + std::to_string(frame.height) + "x" + std::to_string(frame.width) +
                             " does not match model input " + std::to_string(cfg.patch.image_size));
    }
    const Tensor<T> tokens = model::encode(params, frame);
    const std::size_t g = cfg.patch.grid();
    const std::size_t d = cfg.encoder.dim;
    const std::size_t off = cfg.encoder.with_cls ? 1 : 0;
    std::vector<double> values(g * g * d);
    for (std::size_t l = 0; l < g * g; ++l)
        for (std::size_t c = 0; c < d; ++c) values[l * d + c] = static_cast<double>(tokens(l + off, c));
    return normalize_tokens(g, g, d, std::move(values));
}

/// Area fractions of each class inside every grid cell of a pixel label map.
inline LabelField labels_to_field(const LabelMap& labels, std::size_t grid_h, std::size_t grid_w, std::size_t k) {
    if (grid_h == 0 || grid_w == 0 || labels.height % grid_h || labels.width % grid_w) {
        throw ContractError("label map " + std::to_string(labels.height) + "x" + std::to_string(labels.width) +
                            " is not divisible into a " + std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
    }
    const std::size_t ch = labels.height / grid_h, cw = labels.width / grid_w;
    LabelField f(grid_h, grid_w, k);
    const double share = 1.0 / static_cast<double>(ch * cw);
    for (std::size_t y = 0; y < labels.height; ++y) {
        for (std::size_t x = 0; x < labels.width; ++x) {
            const std::size_t c = labels.at(y, x);
            if (c >= k) throw ContractError("label " + std::to_string(c) + " outside [0, " + std::to_string(k) + ")");
            f.at((y / ch) * grid_w + x / cw)[c] += share;
        }
    }
    return f;
}

inline LabelField one_hot(const std::vector<std::size_t>& labels, std::size_t h, std::size_t w, std::size_t k) {
    if (labels.size() != h * w) throw ContractError("label count does not match grid");
    LabelField f(h, w, k);
    for (std::size_t l = 0; l < labels.size(); ++l) {
        if (labels[l] >= k) throw ContractError("label outside class range");
        f.at(l)[labels[l]] = 1.0;
    }
    return f;
}

// ---------------------------------------------------------------------------
// Propagation

namespace detail {

struct Candidate {
    double affinity;
    std::uint32_t context;
    std::uint32_t location;
};

// Higher affinity first; then earlier context, then lower location index.
inline bool ranks_before(const Candidate& a, const Candidate& b) {
    if (a.affinity != b.affinity) return a.affinity > b.affinity;
    if (a.context != b.context) return a.context < b.context;
    return a.location < b.location;
}

inline double dot(const double* a, const double* b, std::size_t d) {
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) s += a[c] * b[c];
    return s;
}

/// Context frame indices for query frame t: the first frame, then the most
/// recent `queue_len` predicted frames, oldest first.
inline std::vector<std::size_t> context_frames(std::size_t t, std::size_t queue_len) {
    std::vector<std::size_t> ctx{0};
    const std::size_t begin = t > queue_len + 1 ? t - queue_len : 1;
    for (std::size_t f = begin; f < t; ++f) ctx.push_back(f);
    return ctx;
}

// Softmax over ranked candidates (already in rank order), then a weighted
// sum of the candidates' soft labels.
inline void vote(std::span<const Candidate> top, const std::vector<const LabelField*>& ctx_labels, double temperature,
                 double* out, std::size_t k) {
    std::fill(out, out + k, 0.0);
    const double a0 = top.front().affinity;
    double z = 0;
    for (const auto& c : top) {
        const double wgt = std::exp((c.affinity - a0) / temperature);
        z += wgt;
        const double* lab = ctx_labels[c.context]->at(c.location);
        for (std::size_t j = 0; j < k; ++j) out[j] += wgt * lab[j];
    }
    for (std::size_t j = 0; j < k; ++j) out[j] /= z;
}

inline void check_inputs(std::span<const FeatureGrid> frames, const LabelField& first, const PropagationConfig& cfg) {
    cfg.validate();
    if (frames.empty()) throw ContractError("propagation needs at least one frame");
    const auto& f0 = frames.front();
    for (std::size_t t = 0; t < frames.size(); ++t) {
        const auto& f = frames[t];
        if (f.h != f0.h || f.w != f0.w || f.d != f0.d || f.values.size() != f.h * f.w * f.d) {
            throw ContractError("feature grid " + std::to_string(t) + " extents differ from frame 0");
        }
    }
    if (first.h != f0.h || first.w != f0.w || first.scores.size() != first.h * first.w * first.k || first.k == 0) {
        throw ContractError("first-frame labels " + std::to_string(first.h) + "x" + std::to_string(first.w) +
                            " do not match feature grid " + std::to_string(f0.h) + "x" + std::to_string(f0.w));
    }
}

}  // namespace detail

/// Propagates first-frame soft labels through a sequence of feature grids.
/// Element 0 of the result is `first_labels`.
inline std::vector<LabelField> propagate(std::span<const FeatureGrid> frames, const LabelField& first_labels,
                                         const PropagationConfig& cfg = {}) {
    detail::check_inputs(frames, first_labels, cfg);
    const std::size_t h = first_labels.h, w = first_labels.w, k = first_labels.k, d = frames[0].d;
    const auto r = static_cast<std::ptrdiff_t>(cfg.radius);
    std::vector<LabelField> out{first_labels};
    out.reserve(frames.size());
    std::vector<detail::Candidate> cands;
    for (std::size_t t = 1; t < frames.size(); ++t) {
        const auto ctx = detail::context_frames(t, cfg.queue_len);
        std::vector<const LabelField*> ctx_labels;
        for (std::size_t c : ctx) ctx_labels.push_back(&out[c]);
        LabelField pred(h, w, k);
        for (std::size_t qy = 0; qy < h; ++qy) {
            const std::size_t y0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(qy) - r));
            const std::size_t y1 = std::min(h - 1, qy + cfg.radius);
            for (std::size_t qx = 0; qx < w; ++qx) {
                const std::size_t x0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(qx) - r));
                const std::size_t x1 = std::min(w - 1, qx + cfg.radius);
                const double* q = frames[t].at(qy * w + qx);
                cands.clear();
                for (std::size_t ci = 0; ci < ctx.size(); ++ci) {
                    const FeatureGrid& cf = frames[ctx[ci]];
                    for (std::size_t y = y0; y <= y1; ++y) {
                        for (std::size_t x = x0; x <= x1; ++x) {
                            const std::size_t loc = y * w + x;
                            cands.push_back({detail::dot(q, cf.at(loc), d), static_cast<std::uint32_t>(ci),
                                             static_cast<std::uint32_t>(loc)});
                        }
                    }
                }
                const std::size_t kk = std::min(cfg.top_k, cands.size());
                std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(kk), cands.end(),
                                  detail::ranks_before);
                detail::vote(std::span<const detail::Candidate>(cands.data(), kk), ctx_labels, cfg.temperature,
                             pred.at(qy * w + qx), k);
            }
        }
        out.push_back(std::move(pred));
    }
    return out;
}

/// Nearest-neighbour expansion of the argmax labels to pixel resolution.
inline LabelMap upsample_labels(const LabelField& field, std::size_t image_h, std::size_t image_w) {
    if (field.k > 256) throw ParameterError("too many classes for an 8-bit label map");
    LabelMap out(image_h, image_w);
    for (std::size_t y = 0; y < image_h; ++y) {
        const std::size_t sy = std::min(field.h - 1, y * field.h / image_h);
        for (std::size_t x = 0; x < image_w; ++x) {
            const std::size_t sx = std::min(field.w - 1, x * field.w / image_w);
            out.at(y, x) = static_cast<std::uint8_t>(field.argmax(sy * field.w + sx));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics

namespace detail {

inline void check_same_extent(const LabelMap& a, const LabelMap& b) {
    if (a.height != b.height || a.width != b.width || a.values.size() != b.values.size()) {
        throw ContractError("mask extents differ: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                            std::to_string(b.height) + "x" + std::to_string(b.width));
    }
}

// Foreground pixels with a background 4-neighbour inside the image.
inline std::vector<std::uint8_t> boundary(const LabelMap& m) {
    std::vector<std::uint8_t> b(m.values.size(), 0);
    for (std::size_t y = 0; y < m.height; ++y) {
        for (std::size_t x = 0; x < m.width; ++x) {
            if (!m.at(y, x)) continue;
            const bool edge = (y > 0 && !m.at(y - 1, x)) || (y + 1 < m.height && !m.at(y + 1, x)) ||
                              (x > 0 && !m.at(y, x - 1)) || (x + 1 < m.width && !m.at(y, x + 1));
            b[y * m.width + x] = edge;
        }
    }
    return b;
}

// Disk dilation of a binary image with integer radius.
inline std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& src, std::size_t h, std::size_t w, int radius) {
    std::vector<std::uint8_t> out(src.size(), 0);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            if (!src[y * w + x]) continue;
            for (int dy = -radius; dy <= radius; ++dy) {
                for (int dx = -radius; dx <= radius; ++dx) {
                    if (dx * dx + dy * dy > radius * radius) continue;
                    const auto yy = static_cast<std::ptrdiff_t>(y) + dy, xx = static_cast<std::ptrdiff_t>(x) + dx;
                    if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(h) || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                    out[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)] = 1;
                }
            }
        }
    }
    return out;
}

}  // namespace detail

inline LabelMap binary_mask(const LabelMap& labels, std::uint8_t id) {
    LabelMap m(labels.height, labels.width);
    for (std::size_t i = 0; i < labels.values.size(); ++i) m.values[i] = labels.values[i] == id;
    return m;
}

/// Region overlap |P n G| / |P u G| of binary masks (nonzero = foreground).
inline double jaccard_j(const LabelMap& pred, const LabelMap& gt) {
    detail::check_same_extent(pred, gt);
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.values.size(); ++i) {
        const bool p = pred.values[i] != 0, g = gt.values[i] != 0;
        inter += p && g;
        uni += p || g;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline int default_boundary_tolerance(std::size_t h, std::size_t w) {
    const double diag = std::hypot(static_cast<double>(h), static_cast<double>(w));
    return static_cast<int>(std::ceil(0.008 * diag));
}

/// Boundary F-measure. A boundary pixel matches when the other mask has a
/// boundary pixel within `tol` (Euclidean). tol < 0 selects the default.
inline double boundary_f(const LabelMap& pred, const LabelMap& gt, int tol = -1) {
    detail::check_same_extent(pred, gt);
    if (tol < 0) tol = default_boundary_tolerance(gt.height, gt.width);
    const auto bp = detail::boundary(pred);
    const auto bg = detail::boundary(gt);
    const auto np = static_cast<std::size_t>(std::count(bp.begin(), bp.end(), 1));
    const auto ng = static_cast<std::size_t>(std::count(bg.begin(), bg.end(), 1));
    if (np == 0 && ng == 0) return 1.0;
    if (np == 0 || ng == 0) return 0.0;
    const auto dp = detail::dilate(bp, gt.height, gt.width, tol);
    const auto dg = detail::dilate(bg, gt.height, gt.width, tol);
    std::size_t hit_p = 0, hit_g = 0;
    for (std::size_t i = 0; i < bp.size(); ++i) {
        hit_p += bp[i] && dg[i];
        hit_g += bg[i] && dp[i];
    }
    const double precision = static_cast<double>(hit_p) / static_cast<double>(np);
    const double recall = static_cast<double>(hit_g) / static_cast<double>(ng);
    return precision + recall == 0 ? 0.0 : 2 * precision * recall / (precision + recall);
}

struct JF {
    double j = 0, f = 0, jf = 0;
};

/// Per-object J and F over frames 1.., averaged per object and then over
/// objects. Objects are the nonzero ids of the first ground-truth frame.
inline JF jf_mean(std::span<const LabelMap> pred, std::span<const LabelMap> gt) {
    if (pred.size() != gt.size()) throw ContractError("prediction and ground-truth sequences differ in length");
    if (gt.empty()) throw ContractError("empty sequence");
    std::vector<std::uint8_t> ids;
    for (std::uint8_t v : gt[0].values)
        if (v && std::find(ids.begin(), ids.end(), v) == ids.end()) ids.push_back(v);
    std::sort(ids.begin(), ids.end());
    JF out;
    if (ids.empty()) {
        out.j = out.f = out.jf = 1.0;
        return out;
    }
    const std::size_t first = gt.size() > 1 ? 1 : 0;
    for (std::uint8_t id : ids) {
        double j = 0, f = 0;
        for (std::size_t t = first; t < gt.size(); ++t) {
            const LabelMap p = binary_mask(pred[t], id), g = binary_mask(gt[t], id);
            j += jaccard_j(p, g);
            f += boundary_f(p, g);
        }
        const auto n = static_cast<double>(gt.size() - first);
        out.j += j / n;
        out.f += f / n;
    }
    out.j /= static_cast<double>(ids.size());
    out.f /= static_cast<double>(ids.size());
    out.jf = 0.5 * (out.j + out.f);
    return out;
}

/// Mean IoU over classes that occur in the ground truth.
inline double miou(const LabelMap& pred, const LabelMap& gt, std::size_t k) {
    detail::check_same_extent(pred, gt);
    std::vector<std::size_t> inter(k, 0), uni(k, 0), present(k, 0);
    for (std::size_t i = 0; i < gt.values.size(); ++i) {
        const std::size_t p = pred.values[i], g = gt.values[i];
        if (p >= k || g >= k) throw ContractError("label outside [0, " + std::to_string(k) + ")");
        present[g] = 1;
        if (p == g) {
            ++inter[g];
            ++uni[g];
        } else {
            ++uni[g];
            ++uni[p];
        }
    }
    double s = 0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < k; ++c) {
        if (!present[c]) continue;
        s += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
        ++n;
    }
    return n ? s / static_cast<double>(n) : 1.0;
}

struct Point {
    double x = 0, y = 0;
};

/// Fraction of keypoints with error <= alpha * scale (closed threshold).
inline double pck(std::span<const Point> pred, std::span<const Point> gt, double alpha, double scale) {
    if (pred.size() != gt.size()) throw ContractError("keypoint lists differ in length");
    if (!(scale > 0)) throw ParameterError("pck scale must be positive");
    if (gt.empty()) return 1.0;
    const double thr = alpha * scale;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) ok += std::hypot(pred[i].x - gt[i].x, pred[i].y - gt[i].y) <= thr;
    return static_cast<double>(ok) / static_cast<double>(gt.size());
}

/// Max side of the bounding box of an object in a label map (0 if absent).
inline double instance_scale(const LabelMap& labels, std::uint8_t id) {
    std::size_t y0 = labels.height, y1 = 0, x0 = labels.width, x1 = 0;
    bool any = false;
    for (std::size_t y = 0; y < labels.height; ++y) {
        for (std::size_t x = 0; x < labels.width; ++x) {
            if (labels.at(y, x) != id) continue;
            any = true;
            y0 = std::min(y0, y), y1 = std::max(y1, y);
            x0 = std::min(x0, x), x1 = std::max(x1, x);
        }
    }
    return any ? static_cast<double>(std::max(y1 - y0 + 1, x1 - x0 + 1)) : 0.0;
}

// ---------------------------------------------------------------------------
// Keypoints as label channels: channel 0 is background, channel i+1 is
// keypoint i.

inline LabelField keypoints_to_field(std::span<const Point> kps, std::size_t grid_h, std::size_t grid_w,
                                     std::size_t image_h, std::size_t image_w) {
    LabelField f(grid_h, grid_w, kps.size() + 1);
    std::vector<std::vector<std::size_t>> owners(grid_h * grid_w);
    for (std::size_t i = 0; i < kps.size(); ++i) {
        const auto gy = std::min(grid_h - 1, static_cast<std::size_t>(std::max(0.0, kps[i].y) * grid_h / image_h));
        const auto gx = std::min(grid_w - 1, static_cast<std::size_t>(std::max(0.0, kps[i].x) * grid_w / image_w));
        owners[gy * grid_w + gx].push_back(i + 1);
    }
    for (std::size_t l = 0; l < owners.size(); ++l) {
        if (owners[l].empty()) {
            f.at(l)[0] = 1.0;
            continue;
        }
        for (std::size_t c : owners[l]) f.at(l)[c] = 1.0 / static_cast<double>(owners[l].size());
    }
    return f;
}

/// Each keypoint lands at the centre of the cell with the highest score in
/// its channel (lowest location index on ties).
inline std::vector<Point> field_to_keypoints(const LabelField& f, std::size_t image_h, std::size_t image_w) {
    std::vector<Point> out;
    for (std::size_t c = 1; c < f.k; ++c) {
        std::size_t best = 0;
        for (std::size_t l = 1; l < f.locations(); ++l)
            if (f.at(l)[c] > f.at(best)[c]) best = l;
        const double cy = (static_cast<double>(best / f.w) + 0.5) * static_cast<double>(image_h) / static_cast<double>(f.h);
        const double cx = (static_cast<double>(best % f.w) + 0.5) * static_cast<double>(image_w) / static_cast<double>(f.w);
        out.push_back({cx, cy});
    }
    return out;
}

}  // namespace cropmae::prop

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cropmae/autograd.hpp"
#include "cropmae/error.hpp"
#include "cropmae/image.hpp"
#include "cropmae/rng.hpp"
#include "cropmae/tensor.hpp"
#include "cropmae/views.hpp"

namespace cropmae::model {

// ---------------------------------------------------------------------------
// Configuration

struct PatchConfig {
    std::size_t image_size = 64;
    std::size_t patch_size = 8;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t n_patches() const { return grid() * grid(); }
    std::size_t patch_dim() const { return patch_size * patch_size * 3; }

    void validate() const {
        if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
            throw ParameterError("patch_size " + std::to_string(patch_size) + " must divide image_size " +
                                 std::to_string(image_size));
        }
    }
};

struct EncoderConfig {
    std::size_t depth = 4;
    std::size_t dim = 64;
    std::size_t heads = 4;
    double mlp_ratio = 4.0;
    bool with_cls = true;

    std::size_t mlp_dim() const { return static_cast<std::size_t>(std::lround(static_cast<double>(dim) * mlp_ratio)); }

    void validate() const {
        if (heads == 0 || dim % heads != 0) throw ParameterError("encoder dim must be divisible by heads");
        if (dim % 4 != 0) throw ParameterError("encoder dim must be divisible by 4 for 2-D sine-cosine positions");
        if (mlp_dim() == 0) throw ParameterError("encoder mlp_ratio too small");
    }
};

struct DecoderConfig {
    std::size_t depth = 2;
    std::size_t dim = 64;
    std::size_t ff_dim = 256;
    std::size_t heads = 4;
    double dropout = 0.1;

    void validate() const {
        if (heads == 0 || dim % heads != 0) throw ParameterError("decoder dim must be divisible by heads");
        if (dim % 4 != 0) throw ParameterError("decoder dim must be divisible by 4 for 2-D sine-cosine positions");
        if (ff_dim == 0) throw ParameterError("decoder ff_dim must be positive");
        if (!(dropout >= 0 && dropout < 1)) throw ParameterError("decoder dropout must lie in [0, 1)");
    }
};

struct ModelConfig {
    PatchConfig patch;
    EncoderConfig encoder;
    DecoderConfig decoder;

    void validate() const {
        patch.validate();
        encoder.validate();
        decoder.validate();
    }

    // ViT-S/16 encoder with the 4-block, 256-d decoder (d_ff 2048).
    static ModelConfig full_scale() {
        ModelConfig c;
        c.patch = {224, 16};
        c.encoder = {12, 384, 6, 4.0, true};
        c.decoder = {4, 256, 2048, 8, 0.1};
        return c;
    }
};

enum class LossScope { MaskedOnly, All };

inline LossScope parse_loss_scope(const std::string& s) {
    if (s == "masked") return LossScope::MaskedOnly;
    if (s == "all") return LossScope::All;
    throw ConfigError("unknown loss scope '" + s + "' (expected masked or all)");
}

inline std::string to_string(LossScope s) { return s == LossScope::MaskedOnly ? "masked" : "all"; }

// ---------------------------------------------------------------------------
// Mask planning

struct MaskPlan {
    std::size_t n_patches = 0;
    double ratio = 0;
    std::vector<std::size_t> visible;  // strictly increasing

    std::vector<std::size_t> masked() const {
        std::vector<std::size_t> out;
        out.reserve(n_patches - visible.size());
        std::size_t j = 0;
        for (std::size_t i = 0; i < n_patches; ++i) {
            if (j < visible.size() && visible[j] == i) {
                ++j;
            } else {
                out.push_back(i);
            }
        }
        return out;
    }

    void validate() const {
        for (std::size_t i = 0; i < visible.size(); ++i) {
            if (visible[i] >= n_patches) throw ContractError("mask plan index out of range");
            if (i && visible[i] <= visible[i - 1]) throw ContractError("mask plan indices must be strictly increasing");
        }
    }
};

/// floor((1 - ratio) * n); the small slack absorbs representation error in ratios like 0.75.
inline std::size_t visible_count(std::size_t n_patches, double ratio) {
    return static_cast<std::size_t>(std::floor((1.0 - ratio) * static_cast<double>(n_patches) + 1e-9));
}

inline MaskPlan make_mask_plan(std::size_t n_patches, double ratio, Rng& rng) {
    if (!(ratio >= 0 && ratio < 1)) throw ParameterError("mask ratio must lie in [0, 1)");
    const std::size_t keep = visible_count(n_patches, ratio);
    if (keep < 1) throw ParameterError("mask ratio leaves no visible patch: need at least one visible patch");
    std::vector<std::size_t> order(n_patches);
    for (std::size_t i = 0; i < n_patches; ++i) order[i] = i;
    // Partial Fisher-Yates: the first `keep` entries are a uniform sample without replacement.
    for (std::size_t i = 0; i < keep; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(n_patches - i));
        std::swap(order[i], order[j]);
    }
    MaskPlan plan{n_patches, ratio, {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep)}};
    std::sort(plan.visible.begin(), plan.visible.end());
    return plan;
}

/// Ratio used on a grid of n patches: unchanged when it leaves a visible
/// patch, otherwise lowered to the ratio that leaves exactly one.
inline double resolve_mask_ratio(double ratio, std::size_t n_patches) {
    if (visible_count(n_patches, ratio) >= 1) return ratio;
    return 1.0 - 1.0 / static_cast<double>(n_patches);
}

// ---------------------------------------------------------------------------
// Patches and positions

template <class T>
Tensor<T> patchify(const Image& image, const PatchConfig& cfg) {
    cfg.validate();
    if (image.height != cfg.image_size || image.width != cfg.image_size) {
        throw ParameterError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                             " does not match patch config " + std::to_string(cfg.image_size));
    }
    const std::size_t g = cfg.grid(), p = cfg.patch_size;
    Tensor<T> out({cfg.n_patches(), cfg.patch_dim()});
    for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx) {
            T* dst = out.row(gy * g + gx).data();
            for (std::size_t py = 0; py < p; ++py)
                for (std::size_t px = 0; px < p; ++px)
                    for (std::size_t c = 0; c < 3; ++c) *dst++ = static_cast<T>(image.at(gy * p + py, gx * p + px, c));
        }
    return out;
}

template <class T>
Image unpatchify(const Tensor<T>& patches, const PatchConfig& cfg) {
    cfg.validate();
    if (patches.rank() != 2 || patches.rows() != cfg.n_patches() || patches.cols() != cfg.patch_dim()) {
        throw ParameterError("patch matrix " + shape_string(patches.shape()) + " does not match patch config");
    }
    const std::size_t g = cfg.grid(), p = cfg.patch_size;
    Image out(cfg.image_size, cfg.image_size);
    for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx) {
            const T* src = patches.row(gy * g + gx).data();
            for (std::size_t py = 0; py < p; ++py)
                for (std::size_t px = 0; px < p; ++px)
                    for (std::size_t c = 0; c < 3; ++c) out.at(gy * p + py, gx * p + px, c) = static_cast<float>(*src++);
        }
    return out;
}

/// Fixed 2-D sine-cosine table [grid^2 x dim] (row-major cell order).
/// The first half of each row encodes the row coordinate, the second half
/// the column; each half is [sin(pos * w_i) | cos(pos * w_i)] with
/// w_i = 10000^(-i / (dim/4)).
template <class T>
Tensor<T> pos_embed_2d(std::size_t grid, std::size_t dim) {
    if (dim == 0 || dim % 4 != 0) throw ParameterError("positional dim must be divisible by 4");
    const std::size_t quarter = dim / 4;
    Tensor<T> table({grid * grid, dim});
    for (std::size_t gy = 0; gy < grid; ++gy)
        for (std::size_t gx = 0; gx < grid; ++gx) {
            auto row = table.row(gy * grid + gx);
            for (std::size_t i = 0; i < quarter; ++i) {
                const double omega = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
                const double ay = static_cast<double>(gy) * omega, ax = static_cast<double>(gx) * omega;
                row[i] = static_cast<T>(std::sin(ay));
                row[quarter + i] = static_cast<T>(std::cos(ay));
                row[2 * quarter + i] = static_cast<T>(std::sin(ax));
                row[3 * quarter + i] = static_cast<T>(std::cos(ax));
            }
        }
    return table;
}

// ---------------------------------------------------------------------------
// Parameter layout

enum class ParamRole { Weight, Bias, Norm, Token };

struct ParamSpec {
    std::string name;
    Shape shape;
    ParamRole role;
};

struct LinearIx {
    std::size_t w = 0, b = 0;
};
struct NormIx {
    std::size_t gamma = 0, beta = 0;
};
struct AttentionIx {
    LinearIx q, k, v, o;
};
struct EncoderBlockIx {
    NormIx norm1;
    AttentionIx attn;
    NormIx norm2;
    LinearIx fc1, fc2;
};
struct DecoderBlockIx {
    NormIx norm_cross;
    AttentionIx cross;
    NormIx norm_ff;
    LinearIx ff1, ff2;
    NormIx norm_self;
    AttentionIx self;
};

/// Index of every trainable tensor. There is exactly one encoder block list;
/// both views are encoded through it.
struct ParamLayout {
    LinearIx patch_embed;
    std::size_t cls_token = 0;
    std::vector<EncoderBlockIx> encoder;
    NormIx encoder_norm;
    LinearIx decoder_embed;
    std::size_t mask_token = 0;
    std::vector<DecoderBlockIx> decoder;
    LinearIx head;
    std::vector<ParamSpec> specs;

    static ParamLayout build(const ModelConfig& cfg) {
        ParamLayout L;
        auto add = [&](std::string name, Shape shape, ParamRole role) {
            L.specs.push_back({std::move(name), std::move(shape), role});
            return L.specs.size() - 1;
        };
        auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
            LinearIx ix;
            ix.w = add(name + ".w", {in, out}, ParamRole::Weight);
            ix.b = add(name + ".b", {out}, ParamRole::Bias);
            return ix;
        };
        auto norm = [&](const std::string& name, std::size_t d) {
            NormIx ix;
            ix.gamma = add(name + ".gamma", {d}, ParamRole::Norm);
            ix.beta = add(name + ".beta", {d}, ParamRole::Norm);
            return ix;
        };
        auto attention = [&](const std::string& name, std::size_t d) {
            return AttentionIx{linear(name + ".q", d, d), linear(name + ".k", d, d), linear(name + ".v", d, d),
                               linear(name + ".o", d, d)};
        };
        const auto& e = cfg.encoder;
        const auto& d = cfg.decoder;
        L.patch_embed = linear("encoder.patch_embed", cfg.patch.patch_dim(), e.dim);
        if (e.with_cls) L.cls_token = add("encoder.cls_token", {1, e.dim}, ParamRole::Token);
        for (std::size_t i = 0; i < e.depth; ++i) {
            const std::string p = "encoder.blocks." + std::to_string(i);
            EncoderBlockIx b;
            b.norm1 = norm(p + ".norm1", e.dim);
            b.attn = attention(p + ".attn", e.dim);
            b.norm2 = norm(p + ".norm2", e.dim);
            b.fc1 = linear(p + ".mlp.fc1", e.dim, e.mlp_dim());
            b.fc2 = linear(p + ".mlp.fc2", e.mlp_dim(), e.dim);
            L.encoder.push_back(b);
        }
        L.encoder_norm = norm("encoder.norm", e.dim);
        L.decoder_embed = linear("decoder.embed", e.dim, d.dim);
        L.mask_token = add("decoder.mask_token", {1, d.dim}, ParamRole::Token);
        for (std::size_t i = 0; i < d.depth; ++i) {
            const std::string p = "decoder.blocks." + std::to_string(i);
            DecoderBlockIx b;
            b.norm_cross = norm(p + ".norm_cross", d.dim);
            b.cross = attention(p + ".cross_attn", d.dim);
            b.norm_ff = norm(p + ".norm_ff", d.dim);
            b.ff1 = linear(p + ".ff.fc1", d.dim, d.ff_dim);
            b.ff2 = linear(p + ".ff.fc2", d.ff_dim, d.dim);
            b.norm_self = norm(p + ".norm_self", d.dim);
            b.self = attention(p + ".self_attn", d.dim);
            L.decoder.push_back(b);
        }
        L.head = linear("decoder.head", d.dim, cfg.patch.patch_dim());
        return L;
    }
};

/// Closed-form trainable parameter count, written out independently of ParamLayout.
inline std::size_t expected_parameter_count(const ModelConfig& cfg) {
    const std::size_t E = cfg.encoder.dim, M = cfg.encoder.mlp_dim(), D = cfg.decoder.dim, F = cfg.decoder.ff_dim;
    const std::size_t P = cfg.patch.patch_dim();
    const std::size_t attn_e = 4 * (E * E + E);
    const std::size_t enc_block = 2 * (2 * E) + attn_e + (E * M + M) + (M * E + E);
    const std::size_t attn_d = 4 * (D * D + D);
    const std::size_t dec_block = 3 * (2 * D) + 2 * attn_d + (D * F + F) + (F * D + D);
    return (P * E + E) + (cfg.encoder.with_cls ? E : 0) + cfg.encoder.depth * enc_block + 2 * E + (E * D + D) + D +
           cfg.decoder.depth * dec_block + (D * P + P);
}

template <class T>
struct ModelParams {
    ModelConfig config;
    ParamLayout layout;
    std::vector<Tensor<T>> tensors;  // aligned with layout.specs
    Tensor<T> encoder_pos;           // [(cls) + N x enc dim]; CLS row is zero
    Tensor<T> decoder_pos;           // [N x dec dim]

    static ModelParams make_empty(const ModelConfig& cfg) {
        cfg.validate();
        ModelParams p;
        p.config = cfg;
        p.layout = ParamLayout::build(cfg);
        const std::size_t grid = cfg.patch.grid(), N = cfg.patch.n_patches();
        const auto patch_pos = pos_embed_2d<T>(grid, cfg.encoder.dim);
        const std::size_t off = cfg.encoder.with_cls ? 1 : 0;
        p.encoder_pos = Tensor<T>({N + off, cfg.encoder.dim});
        std::copy(patch_pos.data().begin(), patch_pos.data().end(), p.encoder_pos.data().begin() + static_cast<std::ptrdiff_t>(off * cfg.encoder.dim));
        p.decoder_pos = pos_embed_2d<T>(grid, cfg.decoder.dim);
        return p;
    }

    /// Truncated-normal (std 0.02) weights and tokens, zero biases, unit norm gains.
    static ModelParams init(const ModelConfig& cfg, Rng& rng) {
        ModelParams p = make_empty(cfg);
        for (const auto& spec : p.layout.specs) {
            Tensor<T> t(spec.shape);
            switch (spec.role) {
                case ParamRole::Weight:
                case ParamRole::Token:
                    for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(0.02));
                    break;
                case ParamRole::Bias:
                    break;
                case ParamRole::Norm:
                    if (spec.name.ends_with(".gamma")) t.fill(T(1));
                    break;
            }
            p.tensors.push_back(std::move(t));
        }
        return p;
    }

    static ModelParams from_tensors(const ModelConfig& cfg, std::vector<Tensor<T>> tensors) {
        ModelParams p = make_empty(cfg);
        if (tensors.size() != p.layout.specs.size()) throw FormatError("parameter count does not match model config");
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            if (tensors[i].shape() != p.layout.specs[i].shape) {
                throw FormatError("parameter " + p.layout.specs[i].name + " has shape " + shape_string(tensors[i].shape()) +
                                  ", expected " + shape_string(p.layout.specs[i].shape));
            }
        }
        p.tensors = std::move(tensors);
        return p;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors) n += t.size();
        return n;
    }

    // Decoupled weight decay applies to projection matrices only.
    bool decays(std::size_t i) const { return layout.specs[i].role == ParamRole::Weight; }

    const std::string& name(std::size_t i) const { return layout.specs[i].name; }

    bool all_finite() const {
        return std::all_of(tensors.begin(), tensors.end(), [](const Tensor<T>& t) { return t.all_finite(); });
    }

    template <class U>
    ModelParams<U> cast() const {
        std::vector<Tensor<U>> out;
        for (const auto& t : tensors) out.push_back(t.template cast<U>());
        return ModelParams<U>::from_tensors(config, std::move(out));
    }
};

// ---------------------------------------------------------------------------
// Forward pass

template <class T>
using Bound = std::vector<Var<T>>;

template <class T>
Bound<T> bind(Tape<T>& tape, const ModelParams<T>& params, bool requires_grad) {
    Bound<T> out;
    out.reserve(params.tensors.size());
    for (const auto& t : params.tensors) out.push_back(tape.leaf(t, requires_grad));
    return out;
}

/// Attention probabilities per layer and head, each [queries x keys].
template <class T>
struct AttentionRecord {
    std::vector<std::vector<Tensor<T>>> layers;
};

template <class T>
struct Forward {
    Tape<T>& tape;
    const ModelParams<T>& params;
    const Bound<T>& p;
    bool training = false;
    Rng* dropout_rng = nullptr;

    Var<T> linear(const Var<T>& x, LinearIx ix) const { return add_bias(matmul(x, p[ix.w]), p[ix.b]); }

    Var<T> norm(const Var<T>& x, NormIx ix) const { return layer_norm(x, p[ix.gamma], p[ix.beta], T(1e-6)); }

    Var<T> drop(const Var<T>& x) const {
        const double rate = params.config.decoder.dropout;
        if (!training || rate == 0.0) return x;
        if (!dropout_rng) throw ContractError("training forward needs a dropout stream");
        return dropout(x, rate, true, *dropout_rng);
    }

    Var<T> attention(const Var<T>& q_in, const Var<T>& kv_in, const AttentionIx& ix, std::size_t heads,
                     std::vector<Tensor<T>>* record) const {
        const Var<T> q = linear(q_in, ix.q);
        const Var<T> kt = transpose(linear(kv_in, ix.k));
        const Var<T> v = linear(kv_in, ix.v);
        const std::size_t d = q.shape()[1];
        const std::size_t dh = d / heads;
        const T s = T(1) / std::sqrt(static_cast<T>(dh));
        std::vector<Var<T>> outs;
        outs.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            const Var<T> scores = scale(matmul(slice(q, 1, h * dh, dh), slice(kt, 0, h * dh, dh)), s);
            const Var<T> probs = softmax(scores, -1);
            if (record) record->push_back(probs.value());
            outs.push_back(matmul(probs, slice(v, 1, h * dh, dh)));
        }
        const Var<T> merged = heads == 1 ? outs[0] : concat(std::span<const Var<T>>(outs), 1);
        return linear(merged, ix.o);
    }

    /// Patch embedding + positions, optional visible-only selection, CLS,
    /// pre-norm transformer blocks and a final norm.
    Var<T> encode(const Var<T>& patches, const MaskPlan* plan, AttentionRecord<T>* record = nullptr) const {
        const auto& cfg = params.config;
        const std::size_t N = cfg.patch.n_patches();
        if (patches.shape() != Shape{N, cfg.patch.patch_dim()}) throw ParameterError("patch matrix does not match config");
        const std::size_t off = cfg.encoder.with_cls ? 1 : 0;
        Tensor<T> patch_pos({N, cfg.encoder.dim});
        std::copy(params.encoder_pos.data().begin() + static_cast<std::ptrdiff_t>(off * cfg.encoder.dim),
                  params.encoder_pos.data().end(), patch_pos.data().begin());
        Var<T> x = add(linear(patches, params.layout.patch_embed), tape.constant(std::move(patch_pos)));
        if (plan) {
            if (plan->n_patches != N) throw ContractError("mask plan built for a different patch count");
            plan->validate();
            x = gather(x, 0, std::span<const std::size_t>(plan->visible));
        }
        if (off) x = concat({p[params.layout.cls_token], x}, 0);
        for (const auto& b : params.layout.encoder) {
            std::vector<Tensor<T>>* layer = nullptr;
            if (record) layer = &record->layers.emplace_back();
            const Var<T> h = norm(x, b.norm1);
            x = add(x, attention(h, h, b.attn, cfg.encoder.heads, layer));
            const Var<T> h2 = norm(x, b.norm2);
            x = add(x, linear(gelu(linear(h2, b.fc1)), b.fc2));
        }
        return norm(x, params.layout.encoder_norm);
    }

    /// Reconstruct every V2 patch from V2's visible tokens and V1's patch tokens.
    /// Block order: cross-attention (V1 keys/values), feed-forward, self-attention.
    Var<T> decode(const Var<T>& enc_v2, const MaskPlan& plan, const Var<T>& enc_v1,
                  AttentionRecord<T>* record = nullptr) const {
        const auto& cfg = params.config;
        const auto& L = params.layout;
        const std::size_t N = cfg.patch.n_patches();
        const std::size_t off = cfg.encoder.with_cls ? 1 : 0;
        plan.validate();
        if (plan.n_patches != N || enc_v2.shape()[0] != off + plan.visible.size()) {
            throw ContractError("mask plan inconsistent with the encoded target view");
        }
        if (enc_v1.shape()[0] != off + N) throw ContractError("context view must be encoded without masking");
        const Var<T> v2 = off ? slice(enc_v2, 0, off, plan.visible.size()) : enc_v2;
        const Var<T> v1 = off ? slice(enc_v1, 0, off, N) : enc_v1;
        const Var<T> pos = tape.constant(params.decoder_pos);

        Var<T> x = scatter(linear(v2, L.decoder_embed), 0, std::span<const std::size_t>(plan.visible), N);
        const auto masked = plan.masked();
        if (!masked.empty()) {
            x = add(x, scatter(broadcast_rows(p[L.mask_token], masked.size()), 0, std::span<const std::size_t>(masked), N));
        }
        x = add(x, pos);
        const Var<T> memory = add(linear(v1, L.decoder_embed), pos);
        const std::size_t heads = cfg.decoder.heads;
        for (const auto& b : L.decoder) {
            std::vector<Tensor<T>>* cross_rec = nullptr;
            std::vector<Tensor<T>>* self_rec = nullptr;
            if (record) {
                record->layers.resize(record->layers.size() + 2);
                cross_rec = &record->layers[record->layers.size() - 2];
                self_rec = &record->layers.back();
            }
            x = add(x, drop(attention(norm(x, b.norm_cross), memory, b.cross, heads, cross_rec)));
            x = add(x, drop(linear(gelu(linear(norm(x, b.norm_ff), b.ff1)), b.ff2)));
            const Var<T> h = norm(x, b.norm_self);
            x = add(x, drop(attention(h, h, b.self, heads, self_rec)));
        }
        return linear(x, L.head);
    }
};

// ---------------------------------------------------------------------------
// Targets and loss

/// Per-row standardization: (p - mean) / sqrt(var + eps), population variance.
template <class T>
Tensor<T> normalize_patch_targets(const Tensor<T>& patches, T eps = T(1e-6)) {
    Tensor<T> out(patches.shape());
    const std::size_t d = patches.cols();
    for (std::size_t r = 0; r < patches.rows(); ++r) {
        const auto src = patches.row(r);
        T mu = 0;
        for (T v : src) mu += v;
        mu /= static_cast<T>(d);
        T var = 0;
        for (T v : src) var += (v - mu) * (v - mu);
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + eps);
        auto dst = out.row(r);
        for (std::size_t j = 0; j < d; ++j) dst[j] = (src[j] - mu) * inv;
    }
    return out;
}

/// Mean squared error over the selected patch rows (masked rows by default).
template <class T>
Var<T> reconstruction_loss(const Var<T>& pred, const Tensor<T>& target, const MaskPlan& plan, LossScope scope) {
    if (pred.shape() != target.shape()) throw DimensionError("prediction/target shape mismatch");
    std::vector<std::size_t> rows;
    if (scope == LossScope::MaskedOnly) {
        rows = plan.masked();
    } else {
        rows.resize(target.rows());
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    }
    if (rows.empty()) throw ContractError("loss selection is empty");
    Tape<T>& tape = *pred.tape();
    const Var<T> tgt = gather(tape.constant(target), 0, std::span<const std::size_t>(rows));
    const Var<T> diff = sub(gather(pred, 0, std::span<const std::size_t>(rows)), tgt);
    return mean(mul(diff, diff));
}

template <class T>
struct TrainForward {
    Var<T> loss;
    Var<T> prediction;
    MaskPlan plan;
    Tensor<T> target;
};

/// patchify -> mask plan -> Siamese encode (V1 full, V2 visible only) ->
/// decode -> normalized targets -> loss. `rng` drives the mask plan and,
/// when training, a derived dropout stream.
template <class T>
TrainForward<T> forward_train(Tape<T>& tape, const ModelParams<T>& params, const Bound<T>& bound,
                              const views::ViewPair& pair, double ratio, Rng& rng, LossScope scope, bool training) {
    const auto& pc = params.config.patch;
    Rng dropout_rng = rng.derive(0xD80F);
    Forward<T> fw{tape, params, bound, training, &dropout_rng};
    const Var<T> p1 = tape.constant(patchify<T>(pair.v1, pc));
    Tensor<T> raw2 = patchify<T>(pair.v2, pc);
    MaskPlan plan = make_mask_plan(pc.n_patches(), ratio, rng);
    const Var<T> e1 = fw.encode(p1, nullptr);
    const Var<T> e2 = fw.encode(tape.constant(raw2), &plan);
    const Var<T> pred = fw.decode(e2, plan, e1);
    Tensor<T> target = normalize_patch_targets(raw2);
    const Var<T> loss = reconstruction_loss(pred, target, plan, scope);
    return {loss, pred, std::move(plan), std::move(target)};
}

// ---------------------------------------------------------------------------
// Inference helpers

/// Encoder tokens for one view (eval mode, no gradients).
template <class T>
Tensor<T> encode(const ModelParams<T>& params, const Image& view, const MaskPlan* plan = nullptr,
                 AttentionRecord<T>* record = nullptr) {
    Tape<T> tape;
    const auto bound = bind(tape, params, false);
    Forward<T> fw{tape, params, bound, false, nullptr};
    return fw.encode(tape.constant(patchify<T>(view, params.config.patch)), plan, record).value();
}

/// Eval-mode reconstruction of V2 given a plan.
template <class T>
Tensor<T> reconstruct(const ModelParams<T>& params, const views::ViewPair& pair, const MaskPlan& plan) {
    Tape<T> tape;
    const auto bound = bind(tape, params, false);
    Forward<T> fw{tape, params, bound, false, nullptr};
    const auto& pc = params.config.patch;
    const Var<T> e1 = fw.encode(tape.constant(patchify<T>(pair.v1, pc)), nullptr);
    const Var<T> e2 = fw.encode(tape.constant(patchify<T>(pair.v2, pc)), &plan);
    return fw.decode(e2, plan, e1).value();
}

/// CLS-query attention over patch keys in one encoder layer: heads x [grid x grid].
/// `layer` < 0 counts from the end (-1 = last).
template <class T>
std::vector<Tensor<T>> extract_cls_attention(const ModelParams<T>& params, const Image& image, int layer = -1) {
    const auto& cfg = params.config;
    if (!cfg.encoder.with_cls) throw ParameterError("model has no CLS token");
    const int depth = static_cast<int>(cfg.encoder.depth);
    const int l = layer < 0 ? depth + layer : layer;
    if (l < 0 || l >= depth) throw ParameterError("attention layer " + std::to_string(layer) + " out of range");
    AttentionRecord<T> rec;
    encode(params, image, nullptr, &rec);
    const std::size_t g = cfg.patch.grid();
    std::vector<Tensor<T>> maps;
    for (const auto& probs : rec.layers[static_cast<std::size_t>(l)]) {
        Tensor<T> m({g, g});
        for (std::size_t i = 0; i < g * g; ++i) m[i] = probs(0, i + 1);
        maps.push_back(std::move(m));
    }
    return maps;
}

// ---------------------------------------------------------------------------
// Attention cost accounting

/// Multiply-accumulates spent in attention score (QK^T) and value (PV)
/// products. A layer with q queries, k keys and width d costs 2*q*k*d.
struct AttentionOps {
    std::uint64_t encoder_v1 = 0;     // depth_e * 2 * (1+N)^2 * d_e
    std::uint64_t encoder_v2 = 0;     // depth_e * 2 * (1+v)^2 * d_e
    std::uint64_t decoder_self = 0;   // depth_d * 2 * N^2 * d_d
    std::uint64_t decoder_cross = 0;  // depth_d * 2 * N * N * d_d (V1 patch tokens as keys)

    std::uint64_t total() const { return encoder_v1 + encoder_v2 + decoder_self + decoder_cross; }
};

inline std::uint64_t attention_layer_macs(std::uint64_t queries, std::uint64_t keys, std::uint64_t width) {
    return 2 * queries * keys * width;
}

inline AttentionOps count_attention_ops(const EncoderConfig& enc, const DecoderConfig& dec, const PatchConfig& patch,
                                        std::size_t visible) {
    patch.validate();
    const std::uint64_t N = patch.n_patches();
    if (visible < 1 || visible > N) throw ParameterError("visible count must lie in [1, N]");
    const std::uint64_t cls = enc.with_cls ? 1 : 0;
    AttentionOps ops;
    ops.encoder_v1 = enc.depth * attention_layer_macs(cls + N, cls + N, enc.dim);
    ops.encoder_v2 = enc.depth * attention_layer_macs(cls + visible, cls + visible, enc.dim);
    ops.decoder_self = dec.depth * attention_layer_macs(N, N, dec.dim);
    ops.decoder_cross = dec.depth * attention_layer_macs(N, N, dec.dim);
    return ops;
}

}  // namespace cropmae::model

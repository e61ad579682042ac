#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "cropmae/gradcheck.hpp"
#include "cropmae/model.hpp"

using namespace cropmae;
using namespace cropmae::model;

namespace {

Image noise_image(std::size_t size, std::uint64_t seed) {
    Rng rng(seed, 0);
    Image img(size, size);
    for (auto& v : img.values) v = static_cast<float>(rng.uniform());
    return img;
}

ModelConfig small_config() {
    ModelConfig c;
    c.patch = {16, 4};
    c.encoder = {2, 16, 2, 2.0, true};
    c.decoder = {1, 16, 32, 2, 0.1};
    return c;
}

ModelConfig micro_config() {
    ModelConfig c;
    c.patch = {8, 4};
    c.encoder = {1, 8, 2, 2.0, true};
    c.decoder = {1, 8, 16, 2, 0.1};
    return c;
}

// Parameters with O(1) entries so that every gradient is well above
// finite-difference noise.
template <class T>
ModelParams<T> spread_params(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed, 1);
    auto p = ModelParams<T>::init(cfg, rng);
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
        const bool gain = p.layout.specs[i].name.ends_with(".gamma");
        for (auto& v : p.tensors[i].data()) v = static_cast<T>(gain ? 1.0 + 0.2 * rng.normal() : 0.4 * rng.normal());
    }
    return p;
}

views::ViewPair pair_of(const Image& a, const Image& b) {
    views::ViewPair p;
    p.v1 = a;
    p.v2 = b;
    return p;
}

}  // namespace

// --- Patches and positions ---------------------------------------------------------

TEST(Patchify, FullSizeGridHas196Rows) {
    const PatchConfig pc{224, 16};
    EXPECT_EQ(pc.n_patches(), 196u);
    const auto m = patchify<float>(Image(224, 224, 0.5f), pc);
    EXPECT_EQ(m.rows(), 196u);
    EXPECT_EQ(m.cols(), 768u);
}

TEST(Patchify, ConstantImageGivesIdenticalRows) {
    const PatchConfig pc{16, 4};
    const auto m = patchify<float>(Image(16, 16, 0.25f), pc);
    for (std::size_t r = 1; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) ASSERT_EQ(m(r, c), m(0, c));
}

TEST(Patchify, InverseIsExact) {
    const PatchConfig pc{16, 4};
    const Image img = noise_image(16, 3);
    EXPECT_EQ(unpatchify(patchify<float>(img, pc), pc).values, img.values);
}

TEST(Patchify, RowOrderIsRasterOverCells) {
    const PatchConfig pc{8, 4};
    Image img(8, 8);
    img.at(4, 0, 1) = 1.0f;  // cell (1, 0), local (0, 0), channel 1
    const auto m = patchify<float>(img, pc);
    EXPECT_EQ(m(2, 1), 1.0f);
}

TEST(Patchify, RejectsBadGeometry) {
    EXPECT_THROW((PatchConfig{10, 4}.validate()), ParameterError);
    EXPECT_THROW(patchify<float>(Image(8, 8), PatchConfig{16, 4}), ParameterError);
}

TEST(PosEmbed, DistinctRowsAndUnitPairs) {
    for (std::size_t g : {2u, 4u, 8u, 16u}) {
        const auto t = pos_embed_2d<double>(g, 16);
        std::set<std::vector<double>> rows;
        for (std::size_t r = 0; r < g * g; ++r) rows.insert(std::vector<double>(t.row(r).begin(), t.row(r).end()));
        EXPECT_EQ(rows.size(), g * g);
        // [sin | cos] halves of each quarter pair up.
        const std::size_t q = 4;
        for (std::size_t r = 0; r < g * g; ++r)
            for (std::size_t half = 0; half < 2; ++half)
                for (std::size_t i = 0; i < q; ++i) {
                    const double s = t(r, half * 8 + i), c = t(r, half * 8 + q + i);
                    ASSERT_NEAR(s * s + c * c, 1.0, 1e-6);
                }
    }
    EXPECT_EQ(pos_embed_2d<double>(4, 8), pos_embed_2d<double>(4, 8));
}

// --- Mask plans -------------------------------------------------------------------

TEST(MaskPlan, VisibleCountsFollowFloorLaw) {
    Rng rng(1, 1);
    EXPECT_EQ(make_mask_plan(196, 0.985, rng).visible.size(), 2u);
    EXPECT_EQ(make_mask_plan(196, 0.95, rng).visible.size(), 9u);
    EXPECT_EQ(make_mask_plan(64, 0.0, rng).visible.size(), 64u);
    const std::pair<double, std::size_t> table[] = {{0.75, 49}, {0.90, 19}, {0.95, 9}, {0.985, 2}, {0.99, 1}};
    for (auto [r, v] : table) EXPECT_EQ(visible_count(196, r), v) << r;
}

TEST(MaskPlan, IndicesUniqueSortedInRange) {
    Rng rng(2, 1);
    for (int i = 0; i < 200; ++i) {
        const auto p = make_mask_plan(64, 0.7, rng);
        ASSERT_EQ(p.visible.size(), 19u);
        for (std::size_t j = 0; j < p.visible.size(); ++j) {
            ASSERT_LT(p.visible[j], 64u);
            if (j) ASSERT_LT(p.visible[j - 1], p.visible[j]);
        }
        ASSERT_EQ(p.masked().size(), 64u - 19u);
    }
}

TEST(MaskPlan, NoVisiblePatchIsAnError) {
    Rng rng(3, 1);
    EXPECT_THROW(make_mask_plan(64, 0.99, rng), ParameterError);
    EXPECT_THROW(make_mask_plan(64, 1.0, rng), ParameterError);
    // The resolver lowers the ratio to keep one patch.
    const double r = resolve_mask_ratio(0.985, 64);
    EXPECT_EQ(visible_count(64, r), 1u);
    EXPECT_EQ(resolve_mask_ratio(0.985, 196), 0.985);
}

TEST(MaskPlan, UniformOverPatches) {
    Rng rng(4, 1);
    std::vector<int> hits(16, 0);
    for (int i = 0; i < 32000; ++i) ++hits[make_mask_plan(16, 0.9, rng).visible[0]];
    // One visible patch per plan; each position should get about 2000.
    for (int h : hits) EXPECT_NEAR(h, 2000, 200);
}

// --- Parameters -----------------------------------------------------------------

TEST(Params, CountMatchesClosedForm) {
    for (const auto& cfg : {small_config(), micro_config(), ModelConfig{}, ModelConfig::full_scale()}) {
        const auto p = ModelParams<float>::make_empty(cfg);
        std::size_t n = 0;
        for (const auto& s : p.layout.specs) n += shape_numel(s.shape);
        EXPECT_EQ(n, expected_parameter_count(cfg));
    }
    Rng rng(1, 1);
    const auto p = ModelParams<float>::init(small_config(), rng);
    EXPECT_EQ(p.parameter_count(), expected_parameter_count(small_config()));
}

TEST(Params, SingleEncoderParameterSet) {
    const auto p = ModelParams<float>::make_empty(ModelConfig{});
    std::set<std::string> names;
    for (const auto& s : p.layout.specs) {
        EXPECT_TRUE(names.insert(s.name).second) << s.name;
        EXPECT_TRUE(s.name.starts_with("encoder.") || s.name.starts_with("decoder.")) << s.name;
    }
    EXPECT_EQ(p.layout.encoder.size(), ModelConfig{}.encoder.depth);
}

TEST(Params, DecayOnlyOnWeights) {
    const auto p = ModelParams<float>::make_empty(small_config());
    for (std::size_t i = 0; i < p.layout.specs.size(); ++i) {
        const auto& n = p.layout.specs[i].name;
        const bool excluded = n.ends_with(".b") || n.ends_with(".gamma") || n.ends_with(".beta") || n.ends_with("_token");
        EXPECT_EQ(p.decays(i), !excluded) << n;
    }
}

TEST(Params, InitIsFiniteAndTruncated) {
    Rng rng(5, 1);
    const auto p = ModelParams<float>::init(ModelConfig{}, rng);
    EXPECT_TRUE(p.all_finite());
    for (std::size_t i = 0; i < p.tensors.size(); ++i)
        if (p.layout.specs[i].role == ParamRole::Weight)
            for (float v : p.tensors[i].data()) ASSERT_LE(std::abs(v), 0.04f);
}

TEST(Params, FromTensorsChecksShapes) {
    auto p = ModelParams<float>::make_empty(micro_config());
    std::vector<Tensor<float>> ts;
    for (const auto& s : p.layout.specs) ts.emplace_back(s.shape);
    ts[0] = Tensor<float>({1, 1});
    EXPECT_THROW(ModelParams<float>::from_tensors(micro_config(), ts), FormatError);
}

// --- Encoder ----------------------------------------------------------------------

TEST(Encoder, TokenCounts) {
    Rng rng(6, 1);
    const auto p = ModelParams<float>::init(ModelConfig{}, rng);
    const Image img = noise_image(64, 1);
    EXPECT_EQ(encode(p, img).rows(), 65u);
    const auto plan = make_mask_plan(64, 0.97, rng);
    EXPECT_EQ(encode(p, img, &plan).rows(), 1u + plan.visible.size());
}

TEST(Encoder, FullSizeTokenCounts) {
    ModelConfig cfg = ModelConfig::full_scale();
    cfg.encoder.depth = 1;
    cfg.encoder.dim = 32;
    cfg.encoder.heads = 2;
    cfg.decoder.depth = 0;
    Rng rng(7, 1);
    const auto p = ModelParams<float>::init(cfg, rng);
    const Image img = noise_image(224, 2);
    EXPECT_EQ(encode(p, img).rows(), 197u);
    const auto plan = make_mask_plan(196, 0.985, rng);
    EXPECT_EQ(encode(p, img, &plan).rows(), 3u);
}

TEST(Encoder, PermutationEquivariantWithoutPositions) {
    const auto cfg = small_config();
    auto p = spread_params<double>(cfg, 8);
    p.encoder_pos.fill(0.0);
    const Image img = noise_image(16, 3);
    const auto patches = patchify<double>(img, cfg.patch);
    const std::size_t N = cfg.patch.n_patches();
    std::vector<std::size_t> perm(N);
    for (std::size_t i = 0; i < N; ++i) perm[i] = (i * 5 + 3) % N;  // 5 is coprime with 16
    Tensor<double> permuted(patches.shape());
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < patches.cols(); ++c) permuted(perm[i], c) = patches(i, c);

    auto run = [&](const Tensor<double>& x) {
        Tape<double> tape;
        const auto bound = bind(tape, p, false);
        Forward<double> fw{tape, p, bound, false, nullptr};
        return fw.encode(tape.constant(x), nullptr).value();
    };
    const auto a = run(patches), b = run(permuted);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < cfg.encoder.dim; ++c) ASSERT_NEAR(a(1 + i, c), b(1 + perm[i], c), 1e-10);
    for (std::size_t c = 0; c < cfg.encoder.dim; ++c) EXPECT_NEAR(a(0, c), b(0, c), 1e-10);
}

// --- Decoder ----------------------------------------------------------------------

TEST(Decoder, OutputShapeForAnyPlan) {
    const auto cfg = small_config();
    Rng rng(9, 1);
    const auto p = ModelParams<float>::init(cfg, rng);
    const auto pair = pair_of(noise_image(16, 1), noise_image(16, 2));
    for (double r : {0.0, 0.5, 0.9375}) {
        const auto plan = make_mask_plan(16, r, rng);
        const auto out = reconstruct(p, pair, plan);
        EXPECT_EQ(out.rows(), 16u);
        EXPECT_EQ(out.cols(), cfg.patch.patch_dim());
    }
}

TEST(Decoder, CrossAttentionIsLive) {
    const auto cfg = small_config();
    const auto p = spread_params<double>(cfg, 10);
    Rng rng(11, 1);
    const auto plan = make_mask_plan(16, 0.75, rng);
    const Image v2 = noise_image(16, 2);
    const auto masked = plan.masked();
    for (std::size_t cell : {0u, 5u, 15u}) {
        Image v1 = noise_image(16, 1);
        const auto base = reconstruct(p, pair_of(v1, v2), plan);
        // Perturb one V1 patch (= one V1 token).
        const std::size_t gy = cell / 4, gx = cell % 4;
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x) v1.at(gy * 4 + y, gx * 4 + x, 0) += 0.3f;
        const auto moved = reconstruct(p, pair_of(v1, v2), plan);
        double change = 0;
        for (std::size_t r : masked)
            for (std::size_t c = 0; c < moved.cols(); ++c) change = std::max(change, std::abs(moved(r, c) - base(r, c)));
        EXPECT_GT(change, 1e-6) << cell;
    }
}

TEST(Decoder, ZeroDepthIsHeadOfScatteredInputs) {
    auto cfg = small_config();
    cfg.decoder.depth = 0;
    const auto p = spread_params<double>(cfg, 12);
    Rng rng(13, 1);
    const auto plan = make_mask_plan(16, 0.75, rng);
    const auto out = reconstruct(p, pair_of(noise_image(16, 1), noise_image(16, 2)), plan);
    const auto& L = p.layout;
    const auto& W = p.tensors[L.head.w];
    const auto& b = p.tensors[L.head.b];
    const auto& tok = p.tensors[L.mask_token];
    for (std::size_t r : plan.masked()) {
        for (std::size_t j = 0; j < W.cols(); ++j) {
            double acc = b[j];
            for (std::size_t k = 0; k < W.rows(); ++k) acc += (tok(0, k) + p.decoder_pos(r, k)) * W(k, j);
            ASSERT_NEAR(out(r, j), acc, 1e-10);
        }
    }
}

TEST(Decoder, InconsistentPlanRejected) {
    const auto cfg = small_config();
    Rng rng(14, 1);
    const auto p = ModelParams<float>::init(cfg, rng);
    const auto pair = pair_of(noise_image(16, 1), noise_image(16, 2));
    const auto plan = make_mask_plan(16, 0.5, rng);
    Tape<float> tape;
    const auto bound = bind(tape, p, false);
    Forward<float> fw{tape, p, bound, false, nullptr};
    const auto e1 = fw.encode(tape.constant(patchify<float>(pair.v1, cfg.patch)), nullptr);
    const auto e2_full = fw.encode(tape.constant(patchify<float>(pair.v2, cfg.patch)), nullptr);
    EXPECT_THROW(fw.decode(e2_full, plan, e1), ContractError);
}

// --- Targets and loss ------------------------------------------------------------

TEST(Targets, ConstantRowIsZero) {
    Tensor<double> t({1, 6});
    t.fill(0.7);
    const auto n = normalize_patch_targets(t);
    for (double v : n.data()) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(Targets, RowsStandardized) {
    Rng rng(1, 2);
    Tensor<double> t({3, 48});
    for (auto& v : t.data()) v = rng.uniform();
    const auto n = normalize_patch_targets(t);
    for (std::size_t r = 0; r < 3; ++r) {
        double m = 0, v = 0;
        for (double x : n.row(r)) m += x;
        m /= 48;
        for (double x : n.row(r)) v += (x - m) * (x - m);
        v /= 48;
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v, 1.0, 1e-3);
    }
}

TEST(Targets, AffineInvariance) {
    Rng rng(2, 2);
    Tensor<double> t({2, 48}), u({2, 48});
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = rng.uniform();
        u[i] = 2.5 * t[i] + 0.3;
    }
    // exact up to the variance epsilon
    const auto a = normalize_patch_targets(t), b = normalize_patch_targets(u);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-4);
}

TEST(Loss, PerfectPredictionAndOffset) {
    Rng rng(3, 2);
    const auto plan = make_mask_plan(4, 0.5, rng);
    Tensor<double> target({4, 3});
    for (auto& v : target.data()) v = rng.normal();
    Tape<double> tape;
    EXPECT_EQ(reconstruction_loss(tape.constant(target), target, plan, LossScope::MaskedOnly).value().item(), 0.0);
    Tensor<double> shifted = target;
    for (auto& v : shifted.data()) v += 0.5;
    EXPECT_NEAR(reconstruction_loss(tape.constant(shifted), target, plan, LossScope::All).value().item(), 0.25, 1e-12);
}

TEST(Loss, MatchesNaiveLoop) {
    Rng rng(4, 2);
    const auto plan = make_mask_plan(4, 0.5, rng);
    Tensor<double> pred({4, 5}), target({4, 5});
    for (auto& v : pred.data()) v = rng.normal();
    for (auto& v : target.data()) v = rng.normal();
    std::vector<bool> visible(4, false);
    for (auto i : plan.visible) visible[i] = true;
    double s = 0;
    int n = 0;
    for (std::size_t r = 0; r < 4; ++r) {
        if (visible[r]) continue;
        for (std::size_t c = 0; c < 5; ++c) {
            s += (pred(r, c) - target(r, c)) * (pred(r, c) - target(r, c));
            ++n;
        }
    }
    Tape<double> tape;
    EXPECT_NEAR(reconstruction_loss(tape.constant(pred), target, plan, LossScope::MaskedOnly).value().item(), s / n, 1e-12);
}

TEST(Loss, ScopeNames) {
    EXPECT_EQ(parse_loss_scope("masked"), LossScope::MaskedOnly);
    EXPECT_EQ(parse_loss_scope("all"), LossScope::All);
    EXPECT_THROW(parse_loss_scope("some"), ConfigError);
}

// --- Full training forward ---------------------------------------------------------

TEST(ForwardTrain, FiniteAtInit) {
    Rng rng(15, 1);
    const auto p = ModelParams<float>::init(ModelConfig{}, rng);
    const auto pair = pair_of(noise_image(64, 1), noise_image(64, 2));
    Tape<float> tape;
    const auto bound = bind(tape, p, true);
    Rng srng(16, 1);
    const auto fw = forward_train(tape, p, bound, pair, resolve_mask_ratio(0.985, 64), srng, LossScope::MaskedOnly, true);
    EXPECT_TRUE(std::isfinite(fw.loss.value().item()));
    EXPECT_EQ(fw.plan.visible.size(), 1u);
    tape.backward(fw.loss);
    for (const auto& v : bound) EXPECT_TRUE(tape.grad(v).all_finite());
}

TEST(ForwardTrain, MicroModelGradientsMatchFiniteDifferences) {
    const auto cfg = micro_config();
    const auto p = spread_params<double>(cfg, 17);
    const auto pair = pair_of(noise_image(8, 3), noise_image(8, 4));
    // Key biases shift every logit of a query equally, so softmax removes them
    // and their exact gradient is zero. They are checked for that separately.
    std::vector<std::size_t> checked, key_bias;
    for (std::size_t i = 0; i < p.tensors.size(); ++i)
        (p.layout.specs[i].name.ends_with(".k.b") ? key_bias : checked).push_back(i);
    ASSERT_EQ(key_bias.size(), 3u);
    auto full = [&](Tape<double>& tape, const std::vector<Var<double>>& sub) {
        std::vector<Var<double>> vars(p.tensors.size());
        for (std::size_t j = 0; j < checked.size(); ++j) vars[checked[j]] = sub[j];
        for (std::size_t i : key_bias) vars[i] = tape.constant(p.tensors[i]);
        Rng rng(18, 1);  // same plan and dropout mask on every evaluation
        return forward_train(tape, p, vars, pair, 0.5, rng, LossScope::MaskedOnly, true).loss;
    };
    std::vector<Tensor<double>> inputs;
    for (std::size_t i : checked) inputs.push_back(p.tensors[i]);
    EXPECT_LE(finite_diff_check_many<double>(full, inputs, 1e-6), 1e-3);

    Tape<double> tape;
    const auto bound = bind(tape, p, true);
    Rng rng(18, 1);
    tape.backward(forward_train(tape, p, bound, pair, 0.5, rng, LossScope::MaskedOnly, true).loss);
    for (std::size_t i : key_bias) {
        const auto g = tape.grad(bound[i]);
        for (double v : g.data()) EXPECT_NEAR(v, 0.0, 1e-12);
    }
}

// --- Attention maps -----------------------------------------------------------------

TEST(Attention, RowsSumToOneAndClsMapsNonnegative) {
    Rng rng(19, 1);
    const auto p = ModelParams<float>::init(ModelConfig{}, rng);
    const Image img = noise_image(64, 5);
    AttentionRecord<float> rec;
    encode(p, img, nullptr, &rec);
    ASSERT_EQ(rec.layers.size(), 4u);
    for (const auto& layer : rec.layers)
        for (const auto& probs : layer)
            for (std::size_t r = 0; r < probs.rows(); ++r) {
                double s = 0;
                for (float v : probs.row(r)) s += v;
                ASSERT_NEAR(s, 1.0, 1e-5);
            }
    const auto maps = extract_cls_attention(p, img);
    ASSERT_EQ(maps.size(), 4u);
    for (std::size_t h = 0; h < maps.size(); ++h) {
        double s = 0;
        for (float v : maps[h].data()) {
            ASSERT_GE(v, 0.0f);
            s += v;
        }
        const double cls_self = rec.layers.back()[h](0, 0);
        EXPECT_LE(s, 1.0 + 1e-5);
        EXPECT_NEAR(s / (1.0 - cls_self), 1.0, 1e-5);
    }
    EXPECT_THROW(extract_cls_attention(p, img, 4), ParameterError);
}

// --- Attention cost ---------------------------------------------------------------

TEST(Attention, DecoderRecordsCrossAndSelfPerBlock) {
    ModelConfig cfg = small_config();
    cfg.decoder.depth = 3;
    Rng rng(20, 1);
    const auto p = ModelParams<float>::init(cfg, rng);
    Rng prng(21, 1);
    const auto plan = make_mask_plan(cfg.patch.n_patches(), 0.75, prng);
    Tape<float> tape;
    const auto bound = bind(tape, p, false);
    Forward<float> fw{tape, p, bound, false, nullptr};
    const auto e1 = fw.encode(tape.constant(patchify<float>(noise_image(16, 6), cfg.patch)), nullptr);
    const auto e2 = fw.encode(tape.constant(patchify<float>(noise_image(16, 7), cfg.patch)), &plan);
    AttentionRecord<float> rec;
    fw.decode(e2, plan, e1, &rec);
    ASSERT_EQ(rec.layers.size(), 6u);
    for (const auto& layer : rec.layers) {
        ASSERT_EQ(layer.size(), cfg.decoder.heads);
        for (const auto& probs : layer) {
            EXPECT_EQ(probs.rows(), cfg.patch.n_patches());
            for (std::size_t r = 0; r < probs.rows(); ++r) {
                double s = 0;
                for (float v : probs.row(r)) s += v;
                EXPECT_NEAR(s, 1.0, 1e-5);
            }
        }
    }
}

TEST(AttentionOps, QuadraticInVisibleCount) {
    const auto cfg = ModelConfig::full_scale();
    const auto a = count_attention_ops(cfg.encoder, cfg.decoder, cfg.patch, 9);
    const auto b = count_attention_ops(cfg.encoder, cfg.decoder, cfg.patch, 2);
    EXPECT_NEAR(static_cast<double>(a.encoder_v2) / static_cast<double>(b.encoder_v2), 100.0 / 9.0, 1e-12);
    const auto full = count_attention_ops(cfg.encoder, cfg.decoder, cfg.patch, 196);
    EXPECT_EQ(full.encoder_v1, full.encoder_v2);
    EXPECT_EQ(attention_layer_macs(20, 20, 8), 4 * attention_layer_macs(10, 10, 8));
    EXPECT_THROW(count_attention_ops(cfg.encoder, cfg.decoder, cfg.patch, 0), ParameterError);
}

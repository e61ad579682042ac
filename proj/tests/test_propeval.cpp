#include <gtest/gtest.h>

#include <cmath>

#include "cropmae/model.hpp"
#include "cropmae/propeval.hpp"
#include "cropmae/propeval_reference.hpp"

using namespace cropmae;
using namespace cropmae::prop;

namespace {

FeatureGrid random_grid(std::size_t h, std::size_t w, std::size_t d, Rng& rng) {
    std::vector<double> v(h * w * d);
    for (auto& x : v) x = rng.normal();
    return normalize_tokens(h, w, d, std::move(v));
}

// Few distinct feature values so that ties are common.
FeatureGrid coarse_grid(std::size_t h, std::size_t w, std::size_t d, Rng& rng) {
    std::vector<double> v(h * w * d);
    for (auto& x : v) x = static_cast<double>(rng.range(-1, 1));
    for (std::size_t l = 0; l < h * w; ++l) v[l * d] += 0.5;  // never all zero
    return normalize_tokens(h, w, d, std::move(v));
}

LabelField random_labels(std::size_t h, std::size_t w, std::size_t k, Rng& rng) {
    std::vector<std::size_t> lab(h * w);
    for (auto& l : lab) l = static_cast<std::size_t>(rng.range(0, static_cast<std::int64_t>(k) - 1));
    return one_hot(lab, h, w, k);
}

LabelMap map_from(std::size_t h, std::size_t w, std::initializer_list<int> v) {
    LabelMap m(h, w);
    std::size_t i = 0;
    for (int x : v) m.values[i++] = static_cast<std::uint8_t>(x);
    return m;
}

model::ModelParams<float> small_params() {
    model::ModelConfig c;
    c.patch = {16, 4};
    c.encoder = {1, 16, 2, 2.0, true};
    c.decoder = {1, 16, 32, 2, 0.1};
    Rng rng(1, 1);
    return model::ModelParams<float>::init(c, rng);
}

}  // namespace

TEST(PropagationConfig, Defaults) {
    const PropagationConfig c;
    EXPECT_EQ(c.top_k, 7u);
    EXPECT_EQ(c.queue_len, 20u);
    EXPECT_EQ(c.radius, 20u);
    EXPECT_DOUBLE_EQ(c.temperature, 0.07);
}

TEST(Features, GridShapeUnitNormAndDeterminism) {
    const auto p = small_params();
    Rng rng(3, 0);
    Image img(16, 16);
    for (auto& v : img.values) v = static_cast<float>(rng.uniform());
    const auto g = extract_feature_grid(p, img);
    EXPECT_EQ(g.h, 4u);
    EXPECT_EQ(g.w, 4u);
    EXPECT_EQ(g.d, 16u);
    for (std::size_t l = 0; l < g.locations(); ++l) EXPECT_NEAR(prop::detail::dot(g.at(l), g.at(l), g.d), 1.0, 1e-9);
    EXPECT_EQ(extract_feature_grid(p, img).values, g.values);
    EXPECT_THROW(extract_feature_grid(p, Image(32, 32)), ParameterError);
}

TEST(Features, LabelsToFieldUsesAreaFractions) {
    const auto m = map_from(2, 4, {0, 1, 2, 2, 1, 1, 2, 2});
    const auto f = labels_to_field(m, 1, 2, 3);
    EXPECT_DOUBLE_EQ(f.at(0)[0], 0.25);
    EXPECT_DOUBLE_EQ(f.at(0)[1], 0.75);
    EXPECT_DOUBLE_EQ(f.at(1)[2], 1.0);
    EXPECT_THROW(labels_to_field(m, 3, 2, 3), ContractError);
}

TEST(Propagate, ContextIsFirstFramePlusRecentQueue) {
    EXPECT_EQ(prop::detail::context_frames(1, 20), (std::vector<std::size_t>{0}));
    EXPECT_EQ(prop::detail::context_frames(3, 20), (std::vector<std::size_t>{0, 1, 2}));
    const auto c = prop::detail::context_frames(25, 20);
    ASSERT_EQ(c.size(), 21u);
    EXPECT_EQ(c[0], 0u);
    EXPECT_EQ(c[1], 5u);
    EXPECT_EQ(c.back(), 24u);
}

TEST(Propagate, HandSoftmaxWeights) {
    FeatureGrid f0{1, 2, 2, {1, 0, 0, 1}};
    FeatureGrid f1{1, 2, 2, {1, 0, 0, 1}};
    const std::vector<FeatureGrid> frames{f0, f1};
    const auto first = one_hot({0, 1}, 1, 2, 2);
    PropagationConfig cfg;
    cfg.top_k = 2;
    const auto out = propagate(frames, first, cfg);
    ASSERT_EQ(out.size(), 2u);
    const double e = std::exp(-1.0 / 0.07);
    EXPECT_NEAR(out[1].at(0)[0], 1.0 / (1.0 + e), 1e-15);
    EXPECT_NEAR(out[1].at(0)[1], e / (1.0 + e), 1e-15);
    EXPECT_NEAR(out[1].at(1)[1], 1.0 / (1.0 + e), 1e-15);
}

TEST(Propagate, IdenticalFramesCopyLabelsWithTopOne) {
    Rng rng(4, 0);
    const auto g = random_grid(6, 5, 8, rng);
    const std::vector<FeatureGrid> frames(4, g);
    const auto first = random_labels(6, 5, 3, rng);
    PropagationConfig cfg;
    cfg.top_k = 1;
    const auto out = propagate(frames, first, cfg);
    for (const auto& f : out) EXPECT_EQ(f.scores, first.scores);
}

TEST(Propagate, SingleFrameReturnsFirstLabels) {
    Rng rng(5, 0);
    const std::vector<FeatureGrid> frames{random_grid(3, 3, 4, rng)};
    const auto first = random_labels(3, 3, 2, rng);
    const auto out = propagate(frames, first);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].scores, first.scores);
}

TEST(Propagate, TopKLargerThanCandidatesUsesAll) {
    Rng rng(6, 0);
    const std::vector<FeatureGrid> frames{random_grid(2, 2, 4, rng), random_grid(2, 2, 4, rng)};
    const auto first = random_labels(2, 2, 3, rng);
    PropagationConfig cfg;
    cfg.top_k = 50;
    EXPECT_EQ(propagate(frames, first, cfg)[1].scores, propagate_reference(frames, first, cfg)[1].scores);
}

TEST(Propagate, SoftLabelsAreConvex) {
    Rng rng(7, 0);
    std::vector<FeatureGrid> frames;
    for (int t = 0; t < 5; ++t) frames.push_back(random_grid(4, 4, 6, rng));
    const auto out = propagate(frames, random_labels(4, 4, 4, rng));
    for (const auto& f : out) {
        for (std::size_t l = 0; l < f.locations(); ++l) {
            double s = 0;
            for (std::size_t c = 0; c < f.k; ++c) {
                EXPECT_GE(f.at(l)[c], 0.0);
                s += f.at(l)[c];
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Propagate, MatchesExhaustiveReferenceOn3x3) {
    Rng rng(8, 0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<FeatureGrid> frames;
        for (int t = 0; t < 4; ++t) frames.push_back(coarse_grid(3, 3, 3, rng));
        const auto first = random_labels(3, 3, 3, rng);
        PropagationConfig cfg;
        cfg.top_k = 3;
        cfg.radius = 1;
        cfg.queue_len = 2;
        const auto a = propagate(frames, first, cfg);
        const auto b = propagate_reference(frames, first, cfg);
        for (std::size_t t = 0; t < a.size(); ++t) EXPECT_EQ(a[t].scores, b[t].scores) << "trial " << trial << " t " << t;
    }
}

TEST(Propagate, MatchesExhaustiveReferenceOnRandomInstances) {
    Rng rng(9, 0);
    for (int trial = 0; trial < 100; ++trial) {
        const auto h = static_cast<std::size_t>(rng.range(1, 6)), w = static_cast<std::size_t>(rng.range(1, 6));
        const auto d = static_cast<std::size_t>(rng.range(1, 5));
        const auto n = static_cast<std::size_t>(rng.range(1, 6));
        const auto k = static_cast<std::size_t>(rng.range(1, 4));
        std::vector<FeatureGrid> frames;
        for (std::size_t t = 0; t < n; ++t) frames.push_back(trial % 2 ? coarse_grid(h, w, d, rng) : random_grid(h, w, d, rng));
        const auto first = random_labels(h, w, k, rng);
        PropagationConfig cfg;
        cfg.top_k = static_cast<std::size_t>(rng.range(1, 10));
        cfg.radius = static_cast<std::size_t>(rng.range(0, 4));
        cfg.queue_len = static_cast<std::size_t>(rng.range(0, 3));
        cfg.temperature = rng.uniform(0.02, 1.0);
        const auto a = propagate(frames, first, cfg);
        const auto b = propagate_reference(frames, first, cfg);
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t t = 0; t < a.size(); ++t) EXPECT_EQ(a[t].scores, b[t].scores) << "trial " << trial;
    }
}

TEST(Propagate, MismatchedInputsAreContractErrors) {
    Rng rng(10, 0);
    const std::vector<FeatureGrid> frames{random_grid(3, 3, 4, rng), random_grid(3, 4, 4, rng)};
    EXPECT_THROW(propagate(frames, random_labels(3, 3, 2, rng)), ContractError);
    const std::vector<FeatureGrid> ok{random_grid(3, 3, 4, rng)};
    EXPECT_THROW(propagate(ok, random_labels(2, 3, 2, rng)), ContractError);
    EXPECT_THROW(propagate(std::vector<FeatureGrid>{}, random_labels(2, 3, 2, rng)), ContractError);
}

TEST(Upsample, NearestCells) {
    const auto f = one_hot({0, 1, 2, 3}, 2, 2, 4);
    const auto m = upsample_labels(f, 4, 6);
    EXPECT_EQ(m.values, (std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 2, 2, 2, 3, 3, 3}));
    const auto same = upsample_labels(f, 2, 2);
    EXPECT_EQ(same.values, (std::vector<std::uint8_t>{0, 1, 2, 3}));
}

TEST(Metrics, JaccardHandExampleAndSymmetry) {
    const auto a = map_from(1, 4, {1, 1, 0, 0});
    const auto b = map_from(1, 4, {0, 1, 1, 0});
    EXPECT_DOUBLE_EQ(jaccard_j(a, b), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(jaccard_j(b, a), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(jaccard_j(a, a), 1.0);
    const auto empty = map_from(1, 4, {0, 0, 0, 0});
    EXPECT_DOUBLE_EQ(jaccard_j(empty, empty), 1.0);
    EXPECT_DOUBLE_EQ(jaccard_j(a, empty), 0.0);
    EXPECT_THROW(jaccard_j(a, map_from(2, 2, {0, 0, 0, 0})), ContractError);
}

TEST(Metrics, JaccardSymmetricOnRandomMasks) {
    Rng rng(11, 0);
    for (int i = 0; i < 50; ++i) {
        LabelMap a(9, 7), b(9, 7);
        for (auto& v : a.values) v = rng.uniform() < 0.4;
        for (auto& v : b.values) v = rng.uniform() < 0.4;
        EXPECT_DOUBLE_EQ(jaccard_j(a, b), jaccard_j(b, a));
        const double j = jaccard_j(a, b);
        EXPECT_GE(j, 0.0);
        EXPECT_LE(j, 1.0);
    }
}

TEST(Metrics, BoundaryF) {
    LabelMap sq(20, 20);
    for (std::size_t y = 5; y < 15; ++y)
        for (std::size_t x = 5; x < 15; ++x) sq.at(y, x) = 1;
    EXPECT_DOUBLE_EQ(boundary_f(sq, sq), 1.0);
    EXPECT_EQ(default_boundary_tolerance(20, 20), 1);  // ceil(0.008 * 28.28)
    EXPECT_EQ(default_boundary_tolerance(480, 854), 8);

    // shifted by one pixel: every boundary pixel within tolerance 1
    LabelMap shifted(20, 20);
    for (std::size_t y = 5; y < 15; ++y)
        for (std::size_t x = 6; x < 16; ++x) shifted.at(y, x) = 1;
    EXPECT_DOUBLE_EQ(boundary_f(shifted, sq), 1.0);
    EXPECT_LT(boundary_f(shifted, sq, 0), 1.0);

    LabelMap far(20, 20);
    far.at(0, 0) = 1;
    far.at(0, 1) = 1;
    EXPECT_DOUBLE_EQ(boundary_f(far, sq), 0.0);
    const LabelMap none(20, 20);
    EXPECT_DOUBLE_EQ(boundary_f(none, none), 1.0);
    EXPECT_DOUBLE_EQ(boundary_f(none, sq), 0.0);
}

TEST(Metrics, BoundaryFSymmetric) {
    Rng rng(12, 0);
    for (int i = 0; i < 30; ++i) {
        LabelMap a(12, 10), b(12, 10);
        for (auto& v : a.values) v = rng.uniform() < 0.5;
        for (auto& v : b.values) v = rng.uniform() < 0.5;
        EXPECT_DOUBLE_EQ(boundary_f(a, b), boundary_f(b, a));
    }
}

TEST(Metrics, JFMeanAveragesObjectsOverLaterFrames) {
    // object 1 perfect, object 2 lost in frame 2
    const std::vector<LabelMap> gt{map_from(1, 4, {1, 1, 2, 2}), map_from(1, 4, {1, 1, 2, 2}), map_from(1, 4, {1, 1, 2, 2})};
    const std::vector<LabelMap> pred{gt[0], gt[1], map_from(1, 4, {1, 1, 0, 0})};
    const auto r = jf_mean(pred, gt);
    EXPECT_DOUBLE_EQ(r.j, 0.5 * (1.0 + 0.5));
    EXPECT_DOUBLE_EQ(r.jf, 0.5 * (r.j + r.f));
    const auto perfect = jf_mean(gt, gt);
    EXPECT_DOUBLE_EQ(perfect.j, 1.0);
    EXPECT_DOUBLE_EQ(perfect.f, 1.0);
}

TEST(Metrics, MiouHandExample) {
    // class 0: inter 1, union 3; class 1: inter 1, union 3 -> 1/3. class 2 absent.
    const auto gt = map_from(1, 4, {0, 0, 1, 1});
    const auto pred = map_from(1, 4, {0, 1, 1, 0});
    EXPECT_DOUBLE_EQ(miou(pred, gt, 3), 1.0 / 3.0);
    const auto half = map_from(1, 4, {0, 0, 0, 0});
    EXPECT_DOUBLE_EQ(miou(half, gt, 3), 0.25);
    EXPECT_DOUBLE_EQ(miou(gt, gt, 5), 1.0);
    EXPECT_THROW(miou(map_from(1, 4, {0, 0, 7, 0}), gt, 3), ContractError);
}

TEST(Metrics, PckClosedThreshold) {
    const std::vector<Point> gt{{0, 0}, {10, 10}, {5, 5}, {2, 2}};
    const std::vector<Point> pred{{3, 4}, {10, 10}, {5, 16}, {2, 12}};
    EXPECT_DOUBLE_EQ(pck(pred, gt, 0.1, 50), 0.5);  // threshold 5: distances 5 (kept), 0, 11, 10
    EXPECT_DOUBLE_EQ(pck(pred, gt, 0.2, 50), 0.75);
    EXPECT_DOUBLE_EQ(pck(pred, gt, 0.1, 49.9), 0.25);
    EXPECT_THROW(pck(pred, std::vector<Point>{{0, 0}}, 0.1, 1), ContractError);
    EXPECT_THROW(pck(pred, gt, 0.1, 0), ParameterError);
}

TEST(Metrics, InstanceScale) {
    const auto m = map_from(3, 4, {0, 1, 0, 0, 0, 1, 1, 1, 0, 0, 0, 0});
    EXPECT_DOUBLE_EQ(instance_scale(m, 1), 3.0);
    EXPECT_DOUBLE_EQ(instance_scale(m, 2), 0.0);
}

TEST(Keypoints, FieldRoundTripToCellCentres) {
    const std::vector<Point> kps{{3, 3}, {13, 5}, {9, 14}};
    const auto f = keypoints_to_field(kps, 4, 4, 16, 16);
    EXPECT_EQ(f.k, 4u);
    const auto back = field_to_keypoints(f, 16, 16);
    ASSERT_EQ(back.size(), 3u);
    EXPECT_DOUBLE_EQ(back[0].x, 2.0);
    EXPECT_DOUBLE_EQ(back[0].y, 2.0);
    EXPECT_DOUBLE_EQ(back[1].x, 14.0);
    EXPECT_DOUBLE_EQ(back[1].y, 6.0);
    EXPECT_DOUBLE_EQ(back[2].x, 10.0);
    EXPECT_DOUBLE_EQ(back[2].y, 14.0);
    EXPECT_DOUBLE_EQ(f.at(1)[0], 1.0);  // cell without keypoints is background
}

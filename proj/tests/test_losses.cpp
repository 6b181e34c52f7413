#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "checks.hpp"
#include "coinseg/errors.hpp"
#include "coinseg/losses.hpp"
#include "oracles.hpp"

namespace coinseg {
namespace {

LabelGrid row(std::initializer_list<ClassId> v) {
    LabelGrid g(1, static_cast<int>(v.size()));
    std::copy(v.begin(), v.end(), g.storage().begin());
    return g;
}

RealGrid real_row(std::initializer_list<double> v) {
    RealGrid g(1, static_cast<int>(v.size()));
    std::copy(v.begin(), v.end(), g.storage().begin());
    return g;
}

// ---------------------------------------------------------------------------
// Pseudo-labels

TEST(PseudoLabels, ConfidenceIsMaxSigmoidOfArgmax) {
    LogitMap z{Tensor(3, 1, 2, 0.0), {kUnknownId, 1, 2}};
    z.values(2, 0, 0) = 3.0;
    z.values(1, 0, 1) = 1.0;
    z.values(2, 0, 1) = 1.0;  // tie: lowest channel wins
    const auto p = predict_from_logits(z);
    EXPECT_EQ(p.labels(0, 0), 2);
    EXPECT_NEAR(p.confidence(0, 0), 0.9525741268224334, 1e-12);
    EXPECT_EQ(p.labels(0, 1), 1);
    EXPECT_NEAR(p.confidence(0, 1), 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(PseudoLabels, MixExamples) {
    const LabelGrid y = row({16, kUnknownId, kUnknownId, kIgnoreId});
    const LabelGrid prev = row({3, 5, 7, 9});
    const RealGrid s = real_row({0.99, 0.75, 0.6, 0.99});
    EXPECT_EQ(mix_labels(y, prev, s, 0.7), row({16, 5, kUnknownId, kIgnoreId}));
}

TEST(PseudoLabels, ThresholdIsInclusive) {
    EXPECT_EQ(mix_labels(row({kUnknownId}), row({4}), real_row({0.7}), 0.7), row({4}));
}

TEST(PseudoLabels, TruthTableIsExhaustivelyCorrect) {
    const auto o = check::pseudo_label_truth_table();
    EXPECT_EQ(o.failures, 0) << o.note;
    EXPECT_EQ(o.instances, 36);
}

TEST(PseudoLabels, NeverInventsLabels) {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> cls(0, 6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        LabelGrid y(4, 4), prev(4, 4);
        RealGrid s(4, 4);
        for (std::size_t i = 0; i < y.size(); ++i) {
            y[i] = u(rng) < 0.1 ? kIgnoreId : static_cast<ClassId>(cls(rng));
            prev[i] = static_cast<ClassId>(cls(rng));
            s[i] = u(rng);
        }
        const LabelGrid mixed = mix_labels(y, prev, s);
        for (std::size_t i = 0; i < y.size(); ++i) EXPECT_TRUE(mixed[i] == y[i] || mixed[i] == prev[i]);
    }
}

TEST(PseudoLabels, InvalidThresholdOrShapeIsRejected) {
    const LabelGrid y = row({0});
    const RealGrid s = real_row({0.5});
    EXPECT_THROW(mix_labels(y, y, s, 0.0), ConfigError);
    EXPECT_THROW(mix_labels(y, y, s, 1.0), ConfigError);
    EXPECT_THROW(mix_labels(y, row({0, 1}), s, 0.5), DataError);
}

// ---------------------------------------------------------------------------
// Masked average pooling

TEST(Map, TopRowMaskAveragesTopRow) {
    Tensor m(1, 2, 2);
    m(0, 0, 0) = 1.0;
    m(0, 0, 1) = 2.0;
    m(0, 1, 0) = 10.0;
    m(0, 1, 1) = 20.0;
    RealGrid top(2, 2, 0.0);
    top(0, 0) = top(0, 1) = 1.0;
    const std::vector<SoftMask> masks{{0, top}};
    const auto set = masked_average_pool(m, masks);
    ASSERT_EQ(set.size(), 1u);
    EXPECT_DOUBLE_EQ(set.entries[0].vector[0], 1.5);
}

TEST(Map, ConstantMapAndFullMask) {
    const Tensor m(3, 4, 4, 2.5);
    std::mt19937_64 rng(1);
    const std::vector<SoftMask> masks{{7, oracle::random_soft_mask(rng, 4, 4)}, {8, RealGrid(4, 4, 1.0)}};
    const auto set = masked_average_pool(m, masks);
    ASSERT_EQ(set.size(), 2u);
    EXPECT_EQ(set.entries[0].id, 7);
    for (const auto& p : set.entries)
        for (double v : p.vector) EXPECT_NEAR(v, 2.5, 1e-12);
}

TEST(Map, EmptyMaskIsOmitted) {
    const Tensor m(2, 2, 2, 1.0);
    const std::vector<SoftMask> masks{{0, RealGrid(2, 2, 0.0)}, {1, RealGrid(2, 2, 1.0)}};
    const auto set = masked_average_pool(m, masks);
    ASSERT_EQ(set.size(), 1u);
    EXPECT_EQ(set.entries[0].id, 1);
}

TEST(Map, AgreesWithOracle) {
    const auto o = check::oracle_map(50);
    EXPECT_EQ(o.failures, 0);
    EXPECT_LT(o.worst, 1e-6);
}

// ---------------------------------------------------------------------------
// Contrastive loss

TEST(Contrastive, SinglePrototypeContributesZero) {
    const std::vector<std::vector<double>> a{{1.0, 0.0}}, b{{0.5, 0.5}};
    EXPECT_EQ(contrastive_from_prototypes(a, b), 0.0);
}

TEST(Contrastive, TwoOrthonormalPairsWithIdenticalPositives) {
    // Per anchor: positive logit 1, negatives {0, 0} from the other pair.
    const std::vector<std::vector<double>> a{{1.0, 0.0}, {0.0, 1.0}};
    const double expected = -std::log(std::exp(1.0) / (2.0 + std::exp(1.0)));
    EXPECT_NEAR(contrastive_from_prototypes(a, a, ContrastiveOptions{false}), expected, 1e-12);
    EXPECT_NEAR(expected, 0.5514, 1e-4);
}

TEST(Contrastive, AlignedPositivesLowerTheLoss) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::vector<double>> a(4, std::vector<double>(6));
        for (auto& v : a)
            for (double& x : v) x = n(rng);
        auto scrambled = a;
        std::rotate(scrambled.begin(), scrambled.begin() + 1, scrambled.end());
        EXPECT_LT(contrastive_from_prototypes(a, a), contrastive_from_prototypes(a, scrambled));
    }
}

TEST(Contrastive, MatchesBruteForce) {
    const auto o = check::oracle_con(50);
    EXPECT_LT(o.worst, 1e-6);
}

TEST(Contrastive, PermutationAndEmptyMaskInvariance) {
    std::mt19937_64 rng(6);
    const Tensor mt = oracle::random_tensor(rng, 3, 4, 4);
    const Tensor mp = oracle::random_tensor(rng, 3, 4, 4);
    std::vector<SoftMask> masks;
    for (int i = 0; i < 4; ++i) masks.push_back({i, oracle::random_soft_mask(rng, 4, 4)});
    const double base = contrastive_con(masks, mt, mp).loss;
    auto reversed = masks;
    std::reverse(reversed.begin(), reversed.end());
    EXPECT_NEAR(contrastive_con(reversed, mt, mp).loss, base, 1e-12);
    auto padded = masks;
    padded.insert(padded.begin() + 2, SoftMask{9, RealGrid(4, 4, 0.0)});
    const auto r = contrastive_con(padded, mt, mp);
    EXPECT_EQ(r.loss, base);
    EXPECT_EQ(r.anchors, 4);
}

TEST(Contrastive, FewerThanTwoMasksIsSkipped) {
    std::mt19937_64 rng(7);
    const Tensor mt = oracle::random_tensor(rng, 3, 4, 4);
    const std::vector<SoftMask> one{{0, RealGrid(4, 4, 1.0)}};
    const auto r = contrastive_con(one, mt, mt, {}, true);
    EXPECT_TRUE(r.skipped);
    EXPECT_EQ(r.loss, 0.0);
    for (double g : r.gradient.values()) EXPECT_EQ(g, 0.0);
}

TEST(Contrastive, ShapeMismatchIsDataError) {
    const Tensor a(3, 4, 4), b(3, 2, 2);
    const std::vector<SoftMask> masks{{0, RealGrid(4, 4, 1.0)}, {1, RealGrid(4, 4, 1.0)}};
    EXPECT_THROW((void)contrastive_con(masks, a, b), DataError);
}

TEST(Contrastive, ClassMasksExcludeUnknownIgnoreAndSmallClasses) {
    LabelGrid y(8, 8, kUnknownId);
    for (int x = 0; x < 8; ++x) y(0, x) = kIgnoreId;
    for (int yy = 4; yy < 8; ++yy)
        for (int x = 0; x < 8; ++x) y(yy, x) = 2;
    y(2, 2) = 5;  // a quarter cell at 4 x 4
    const auto masks = class_soft_masks(y, 4, 4);
    ASSERT_EQ(masks.size(), 1u);
    EXPECT_EQ(masks[0].id, 2);
}

TEST(Contrastive, ProposalMasksSkipEmptySlots) {
    Grid<std::uint16_t> a(4, 4, 0);
    for (int x = 0; x < 4; ++x) a(3, x) = 1;
    const MaskProposalSet p(10, a);
    EXPECT_EQ(proposal_soft_masks(p, 2, 2).size(), 2u);
}

// ---------------------------------------------------------------------------
// Distillation

TEST(FeatureKd, IdenticalMapsGiveZeroAndOffsetGivesSquare) {
    std::mt19937_64 rng(8);
    const Tensor a = oracle::random_tensor(rng, 3, 4, 4);
    EXPECT_EQ(feature_kd(a, a).loss, 0.0);
    Tensor b = a;
    for (double& v : b.values()) v += 0.3;
    EXPECT_NEAR(feature_kd(b, a).loss, 0.09, 1e-12);
    EXPECT_NEAR(check::oracle_feature_kd(50).worst, 0.0, 1e-6);
    EXPECT_THROW((void)feature_kd(a, Tensor(2, 4, 4)), DataError);
}

TEST(Remodel, UnknownChannelBecomesSumOfCurrentClasses) {
    LogitMap z{Tensor(5, 1, 1), {kUnknownId, 1, 2, 4, 5}};
    const double vals[] = {0.2, 1.0, -0.5, 2.0, 1.0};
    for (int c = 0; c < 5; ++c) z.values(c, 0, 0) = vals[c];
    const std::vector<ClassId> current{4, 5};
    const LogitMap zh = remodel_logits(z, current);
    EXPECT_EQ(zh.channel_ids, (std::vector<ClassId>{kUnknownId, 1, 2}));
    EXPECT_DOUBLE_EQ(zh.values(0, 0, 0), 3.0);
    EXPECT_DOUBLE_EQ(zh.values(1, 0, 0), 1.0);
    EXPECT_DOUBLE_EQ(zh.values(2, 0, 0), -0.5);
}

TEST(Remodel, BackwardRoutesUnknownGradientToCurrentChannels) {
    LogitMap z{Tensor(4, 1, 1, 0.0), {kUnknownId, 1, 2, 3}};
    const std::vector<ClassId> current{2, 3};
    Tensor g(2, 1, 1);
    g(0, 0, 0) = 0.5;
    g(1, 0, 0) = -1.0;
    const Tensor back = remodel_logits_backward(z, current, g);
    EXPECT_EQ(back(0, 0, 0), 0.0);
    EXPECT_EQ(back(1, 0, 0), -1.0);
    EXPECT_EQ(back(2, 0, 0), 0.5);
    EXPECT_EQ(back(3, 0, 0), 0.5);
}

TEST(LogitKd, SelfEntropyAndOneHotLimits) {
    // Equal uniform logits: cross-entropy is log C, scaled by 1/C.
    const LogitMap u{Tensor(4, 2, 2, 0.0), {kUnknownId, 1, 2, 3}};
    EXPECT_NEAR(logit_kd(u, u).loss, std::log(4.0) / 4.0, 1e-12);
    // A confident teacher aligned with a confident student costs almost nothing.
    LogitMap t{Tensor(3, 1, 1, -30.0), {kUnknownId, 1, 2}};
    t.values(1, 0, 0) = 30.0;
    EXPECT_LT(logit_kd(t, t).loss, 1e-12);
    EXPECT_LT(check::oracle_logit_kd(50).worst, 1e-6);
}

TEST(LogitKd, ChannelMismatchIsDataError) {
    const LogitMap a{Tensor(3, 1, 1), {kUnknownId, 1, 2}};
    const LogitMap b{Tensor(3, 1, 1), {kUnknownId, 1, 3}};
    EXPECT_THROW((void)logit_kd(a, b), DataError);
}

// ---------------------------------------------------------------------------
// BCE

TEST(Bce, ConfidentCorrectIsNearZeroAndZeroLogitsGiveLn2) {
    LogitMap z{Tensor(3, 1, 2, -20.0), {kUnknownId, 1, 2}};
    z.values(1, 0, 0) = 20.0;
    z.values(0, 0, 1) = 20.0;
    EXPECT_LT(bce_seg(z, row({1, kUnknownId})).loss, 1e-6);
    const LogitMap zero{Tensor(3, 2, 2, 0.0), {kUnknownId, 1, 2}};
    LabelGrid y(2, 2, 1);
    EXPECT_NEAR(bce_seg(zero, y).loss, std::log(2.0), 1e-12);
}

TEST(Bce, IgnorePixelsContributeNothing) {
    std::mt19937_64 rng(9);
    const LogitMap z{oracle::random_tensor(rng, 3, 1, 3, -3.0, 3.0), {kUnknownId, 1, 2}};
    LogitMap z2 = z;
    z2.values(0, 0, 2) = 100.0;
    z2.values(2, 0, 2) = -100.0;
    const LabelGrid y = row({1, 2, kIgnoreId});
    EXPECT_EQ(bce_seg(z, y).loss, bce_seg(z2, y).loss);
    const auto all_ignored = bce_seg(z, row({kIgnoreId, kIgnoreId, kIgnoreId}));
    EXPECT_TRUE(all_ignored.skipped);
    EXPECT_EQ(all_ignored.loss, 0.0);
}

TEST(Bce, MatchesBruteForceAndRejectsForeignLabels) {
    EXPECT_LT(check::oracle_bce(50).worst, 1e-6);
    const LogitMap z{Tensor(2, 1, 1), {kUnknownId, 1}};
    EXPECT_THROW((void)bce_seg(z, row({7})), DataError);
}

// ---------------------------------------------------------------------------
// Objective

TEST(Objective, WeightedSum) {
    const LossComponents c{1.0, 0.5, 0.3, 0.2, 0.4};
    const auto b = total_objective(c, 0.01, 0.1);
    EXPECT_NEAR(b.total, 1.068, 1e-12);
    EXPECT_NEAR(b.contrastive, 0.8, 1e-12);
    EXPECT_NEAR(b.regularization, 0.6, 1e-12);
    EXPECT_EQ(LossBreakdown::from_json(b.to_json()), b);
}

TEST(Objective, NonFiniteComponentIsTrainingError) {
    LossComponents c{1.0, 0.5, 0.3, 0.2, 0.4};
    c.intra = std::nan("");
    try {
        (void)total_objective(c);
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("L_itr"), std::string::npos) << e.what();
    }
    EXPECT_THROW((void)total_objective({}, -1.0, 0.1), ConfigError);
}

}  // namespace
}  // namespace coinseg

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "checks.hpp"
#include "coinseg/errors.hpp"
#include "coinseg/eval.hpp"

namespace coinseg {
namespace {

LabelGrid row(std::initializer_list<ClassId> v) {
    LabelGrid g(1, static_cast<int>(v.size()));
    std::copy(v.begin(), v.end(), g.storage().begin());
    return g;
}

TEST(Confusion, CountsAndIgnore) {
    ConfusionMatrix cm({kUnknownId, 1, 2});
    cm.accumulate(row({1, 1, 2, kIgnoreId, 0}), row({1, 2, 2, 1, 0}));
    EXPECT_EQ(cm.total(), 4u);
    EXPECT_EQ(cm.count(cm.index_of(1), cm.index_of(2)), 1u);
    EXPECT_EQ(cm.row_sum(cm.index_of(1)), 2u);
    EXPECT_EQ(cm.col_sum(cm.index_of(2)), 2u);
    EXPECT_THROW(cm.accumulate(row({5}), row({1})), DataError);
    EXPECT_THROW(cm.accumulate(row({1, 1}), row({1})), DataError);
}

TEST(Iou, ThreeOfFive) {
    // class 1: 3 correct, 1 missed, 1 false positive -> 3 / 5
    ConfusionMatrix cm({kUnknownId, 1});
    cm.accumulate(row({1, 1, 1, 1, 0, 0}), row({1, 1, 1, 0, 1, 0}));
    EXPECT_DOUBLE_EQ(iou(cm, 1), 0.6);
}

TEST(Iou, AbsentClassIsNaNAndSkippedInMeans) {
    ConfusionMatrix cm({kUnknownId, 1, 2});
    cm.accumulate(row({1, 0}), row({1, 0}));
    EXPECT_TRUE(std::isnan(iou(cm, 2)));
    const std::vector<ClassId> ids{1, 2};
    EXPECT_DOUBLE_EQ(mean_defined(cm, ids), 1.0);
    const std::vector<ClassId> none{2};
    EXPECT_TRUE(std::isnan(mean_defined(cm, none)));
}

TEST(Iou, MatchesPixelOracle) {
    const auto o = check::oracle_iou(50);
    EXPECT_EQ(o.failures, 0);
    EXPECT_LT(o.worst, 1e-6);
}

TEST(Grouped, BaseNovelAllMeans) {
    const auto s = parse_scenario("2-2", 6);
    ConfusionMatrix cm({kUnknownId, 1, 2, 3, 4});
    // c_u perfect, 1 perfect, 2 half, 3 perfect, 4 zero
    cm.accumulate(row({0, 1, 2, 2, 3, 4}), row({0, 1, 2, 0, 3, 3}));
    const double u = iou(cm, 0), c1 = iou(cm, 1), c2 = iou(cm, 2), c3 = iou(cm, 3), c4 = iou(cm, 4);
    const auto r = grouped_miou(cm, s, 2);
    EXPECT_DOUBLE_EQ(r.base_miou, (u + c1 + c2) / 3.0);
    EXPECT_DOUBLE_EQ(r.novel_miou, (c3 + c4) / 2.0);
    EXPECT_DOUBLE_EQ(r.all_miou, (u + c1 + c2 + c3 + c4) / 5.0);
    EvalOptions no_bg;
    no_bg.unknown_as_background = false;
    const auto r2 = grouped_miou(cm, s, 2, no_bg);
    EXPECT_DOUBLE_EQ(r2.base_miou, (c1 + c2) / 2.0);
    EXPECT_TRUE(std::isnan(grouped_miou(cm, s, 1).novel_miou));
}

TEST(Confusion, MergeEqualsJointAccumulation) {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> cls(0, 3);
    const std::vector<ClassId> classes{0, 1, 2, 3};
    ConfusionMatrix joint(classes), a(classes), b(classes);
    for (int i = 0; i < 10; ++i) {
        LabelGrid g(4, 4), p(4, 4);
        for (auto& v : g.values()) v = static_cast<ClassId>(cls(rng));
        for (auto& v : p.values()) v = static_cast<ClassId>(cls(rng));
        joint.accumulate(g, p);
        (i % 2 ? a : b).accumulate(g, p);
    }
    a.merge(b);
    EXPECT_EQ(a, joint);
    EXPECT_THROW(a.merge(ConfusionMatrix({0, 1})), DataError);
}

TEST(Curves, CsvRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "coinseg_test_curves";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    std::vector<MetricsRecord> rs(2);
    rs[0].step = 1;
    rs[0].all_miou = rs[0].base_miou = 0.9;
    rs[0].novel_miou = std::numeric_limits<double>::quiet_NaN();
    rs[1].step = 2;
    rs[1].all_miou = 0.5;
    rs[1].base_miou = 0.7;
    rs[1].novel_miou = 0.25;
    emit_curves(rs, dir / "c.csv", dir / "c.svg");
    EXPECT_TRUE(std::filesystem::exists(dir / "c.svg"));
    const auto back = read_curves(dir / "c.csv");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].step, 2);
    EXPECT_DOUBLE_EQ(back[1].novel_miou, 0.25);
    EXPECT_TRUE(std::isnan(back[0].novel_miou));
    EXPECT_THROW(emit_curves({}, dir / "x.csv", dir / "x.svg"), ConfigError);
    std::filesystem::remove_all(dir);
}

TEST(Metrics, JsonRoundTripKeepsNaN) {
    MetricsRecord r;
    r.step = 3;
    r.class_iou = {{0, 0.5}, {4, std::numeric_limits<double>::quiet_NaN()}};
    r.base_miou = 0.4;
    r.novel_miou = std::numeric_limits<double>::quiet_NaN();
    r.all_miou = 0.3;
    const MetricsRecord back = MetricsRecord::from_json(r.to_json());
    EXPECT_EQ(back, r);
    MetricsRecord other = r;
    other.all_miou = 0.31;
    EXPECT_FALSE(other == r);
}

}  // namespace
}  // namespace coinseg

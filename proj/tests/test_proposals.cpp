#include <filesystem>
#include <map>
#include <queue>
#include <random>

#include <gtest/gtest.h>

#include "coinseg/data.hpp"
#include "coinseg/errors.hpp"
#include "coinseg/proposals.hpp"
#include "oracles.hpp"

namespace coinseg {
namespace {

/// 4-connected components of identical (quantized) colours.
Grid<int> colour_components(const Image& img) {
    const int h = img.height(), w = img.width();
    auto key = [&](int y, int x) {
        int k = 0;
        for (int c = 0; c < 3; ++c) k = k * 256 + static_cast<int>(std::lround(img(c, y, x) * 255.0));
        return k;
    };
    Grid<int> label(h, w, -1);
    int next = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (label(y, x) >= 0) continue;
            std::queue<std::pair<int, int>> q;
            q.push({y, x});
            label(y, x) = next;
            while (!q.empty()) {
                auto [cy, cx] = q.front();
                q.pop();
                const int dy[] = {1, -1, 0, 0}, dx[] = {0, 0, 1, -1};
                for (int d = 0; d < 4; ++d) {
                    const int ny = cy + dy[d], nx = cx + dx[d];
                    if (ny < 0 || nx < 0 || ny >= h || nx >= w || label(ny, nx) >= 0) continue;
                    if (key(ny, nx) != key(cy, cx)) continue;
                    label(ny, nx) = next;
                    q.push({ny, nx});
                }
            }
            ++next;
        }
    }
    return label;
}

/// Two labelings describe the same partition iff the label pairs are a bijection.
bool same_partition(const Grid<std::uint16_t>& a, const Grid<int>& b) {
    std::map<int, int> ab, ba;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto [it1, new1] = ab.emplace(a[i], b[i]);
        const auto [it2, new2] = ba.emplace(b[i], a[i]);
        if (it1->second != b[i] || it2->second != a[i]) return false;
    }
    return true;
}

void expect_partition(const MaskProposalSet& p) {
    const auto masks = p.masks();
    ASSERT_EQ(static_cast<int>(masks.size()), p.slots());
    for (int y = 0; y < p.height(); ++y) {
        for (int x = 0; x < p.width(); ++x) {
            int sum = 0;
            for (const auto& m : masks) sum += m(y, x);
            EXPECT_EQ(sum, 1);
        }
    }
}

TEST(Proposals, ConstantImageIsOneRegion) {
    const Image img(3, 32, 32, 0.4);
    const auto p = generate_proposals(img, 100);
    EXPECT_EQ(p.slots(), 100);
    EXPECT_EQ(p.region_count(), 1);
    for (int n = 1; n < p.slots(); ++n) {
        const auto m = p.mask(n);
        for (auto v : m.values()) EXPECT_EQ(v, 0);
    }
    expect_partition(p);
}

TEST(Proposals, TwoFlatHalvesMatchComponentOracle) {
    Image img(3, 32, 32);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            img(0, y, x) = x < 16 ? 0.9 : 0.1;
            img(1, y, x) = x < 16 ? 0.2 : 0.7;
            img(2, y, x) = 0.5;
        }
    const auto p = generate_proposals(img, 100);
    EXPECT_EQ(p.region_count(), 2);
    EXPECT_TRUE(same_partition(p.assignment(), colour_components(img)));
}

TEST(Proposals, FlatBlocksMatchComponentOracle) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        Image img(3, 32, 32);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        double palette[4][3];
        for (auto& c : palette)
            for (double& v : c) v = u(rng);
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                const int block = (y / 16) * 2 + x / 16;
                for (int c = 0; c < 3; ++c) img(c, y, x) = palette[block][c];
            }
        ProposalConfig cfg;
        cfg.k = 1.0;  // any colour step separates flat blocks
        const auto p = generate_proposals(img, 100, cfg);
        EXPECT_TRUE(same_partition(p.assignment(), colour_components(img))) << trial;
    }
}

TEST(Proposals, PartitionAndCountOnSyntheticImages) {
    SyntheticSpec spec;
    spec.samples_per_class = 2;
    const Dataset d = generate_synthetic_dataset(spec);
    for (std::size_t i = 0; i < 4; ++i) {
        for (int n : {2, 5, 100}) {
            const auto p = generate_proposals(d.sample(i).image, n);
            EXPECT_LE(p.region_count(), n);
            EXPECT_EQ(p.slots(), n);
            expect_partition(p);
        }
    }
}

TEST(Proposals, Deterministic) {
    SyntheticSpec spec;
    spec.samples_per_class = 1;
    const Image img = generate_synthetic_dataset(spec).sample(3).image;
    EXPECT_EQ(generate_proposals(img, 50), generate_proposals(img, 50));
}

TEST(Proposals, RegionIdsFollowRasterOrder) {
    SyntheticSpec spec;
    spec.samples_per_class = 1;
    const auto p = generate_proposals(generate_synthetic_dataset(spec).sample(0).image, 100);
    int next = 0;
    for (auto v : p.assignment().values()) {
        ASSERT_LE(static_cast<int>(v), next);
        if (v == next) ++next;
    }
    EXPECT_EQ(next, p.region_count());
}

TEST(Downsample, AllOnesStaysAllOnes) {
    const RealGrid ones(4, 4, 1.0);
    const RealGrid d = area_downsample(ones, 2, 2);
    for (double v : d.values()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Downsample, PureBlockCheckerboardIsBinary) {
    RealGrid board(8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) board(y, x) = ((y / 2) + (x / 2)) % 2 == 0 ? 1.0 : 0.0;
    const RealGrid d = area_downsample(board, 4, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) EXPECT_DOUBLE_EQ(d(y, x), (y + x) % 2 == 0 ? 1.0 : 0.0);
}

TEST(Downsample, MatchesAreaIntegrationOracle) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto [sh, th] : {std::pair{12, 5}, {16, 4}, {10, 3}, {7, 7}}) {
        RealGrid src(sh, sh + 1);
        for (double& v : src.values()) v = u(rng) < 0.5 ? 1.0 : 0.0;
        const RealGrid a = area_downsample(src, th, th);
        const RealGrid b = oracle::area_pool(src, th, th);
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    }
}

TEST(Downsample, PartitionSurvives) {
    SyntheticSpec spec;
    spec.samples_per_class = 1;
    const auto p = generate_proposals(generate_synthetic_dataset(spec).sample(1).image, 100);
    for (int h : {16, 10, 7}) {
        const auto soft = downsample_masks(p, h, h);
        ASSERT_EQ(static_cast<int>(soft.size()), p.slots());
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < h; ++x) {
                double s = 0.0;
                for (const auto& m : soft) {
                    EXPECT_GE(m(y, x), 0.0);
                    EXPECT_LE(m(y, x), 1.0 + 1e-12);
                    s += m(y, x);
                }
                EXPECT_NEAR(s, 1.0, 1e-12);
            }
        const auto from_binary = downsample_masks(p.masks(), h, h);
        for (std::size_t n = 0; n < soft.size(); ++n)
            for (std::size_t i = 0; i < soft[n].size(); ++i) EXPECT_NEAR(soft[n][i], from_binary[n][i], 1e-12);
    }
}

TEST(Downsample, LargerTargetIsRejected) {
    EXPECT_THROW(area_downsample(RealGrid(4, 4, 1.0), 8, 8), ConfigError);
}

TEST(ProposalCacheIo, SaveLoadRoundTrip) {
    SyntheticSpec spec;
    spec.samples_per_class = 1;
    const Dataset d = generate_synthetic_dataset(spec);
    const ProposalCache cache = build_proposal_cache(d, 100, {}, 2);
    EXPECT_EQ(cache.size(), d.size());
    EXPECT_EQ(cache, build_proposal_cache(d, 100, {}, 1));
    const auto path = std::filesystem::temp_directory_path() / "coinseg_test_proposals.bin";
    cache.save(path);
    EXPECT_EQ(ProposalCache::load(path), cache);
    std::filesystem::remove(path);
    EXPECT_THROW((void)cache.get("absent"), DataError);
}

TEST(Proposals, FewerThanTwoSlotsIsRejected) {
    EXPECT_THROW(generate_proposals(Image(3, 8, 8), 1), ConfigError);
}

TEST(ProposalSet, TooManyRegionsForSlotsIsRejected) {
    Grid<std::uint16_t> a(2, 2);
    a[0] = 0;
    a[1] = 1;
    a[2] = 2;
    a[3] = 3;
    EXPECT_THROW(MaskProposalSet(3, a), DataError);
}

}  // namespace
}  // namespace coinseg

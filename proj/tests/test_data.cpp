#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "coinseg/data.hpp"
#include "coinseg/errors.hpp"
#include "coinseg/image_io.hpp"
#include "coinseg/scenario.hpp"

namespace fs = std::filesystem;

namespace coinseg {
namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("coinseg_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

SyntheticSpec small_spec(int per_class = 8) {
    SyntheticSpec s;
    s.samples_per_class = per_class;
    return s;
}

std::array<long, 256> histogram(const LabelGrid& g) {
    std::array<long, 256> h{};
    for (ClassId v : g.values()) ++h[v];
    return h;
}

TEST(Synthetic, BitReproducibleUnderSeed) {
    SyntheticSpec spec;
    spec.seed = 7;
    const Dataset a = generate_synthetic_dataset(spec);
    const Dataset b = generate_synthetic_dataset(spec);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.sample(i), b.sample(i));
}

TEST(Synthetic, DifferentSeedsDiffer) {
    SyntheticSpec a = small_spec(), b = small_spec();
    b.seed = a.seed + 1;
    EXPECT_NE(generate_synthetic_dataset(a).sample(0), generate_synthetic_dataset(b).sample(0));
}

TEST(Synthetic, MasksUseOnlyClassIdsAndUnknown) {
    const Dataset d = generate_synthetic_dataset(small_spec());
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (ClassId v : d.mask(i).values()) EXPECT_TRUE(v <= 6) << int(v);
    }
}

TEST(Synthetic, EveryClassAppearsInEnoughImages) {
    const SyntheticSpec spec = small_spec(10);
    const Dataset d = generate_synthetic_dataset(spec);
    EXPECT_EQ(d.size(), static_cast<std::size_t>(spec.num_classes * spec.samples_per_class));
    std::array<int, 256> images_with{};
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto h = histogram(d.mask(i));
        for (int c = 1; c <= spec.num_classes; ++c) images_with[c] += h[c] > 0 ? 1 : 0;
        // classes_present agrees with a direct count over the mask
        std::vector<ClassId> present;
        for (int c = 1; c <= spec.num_classes; ++c) {
            if (h[c] > 0) present.push_back(static_cast<ClassId>(c));
        }
        EXPECT_EQ(d.classes_present(i), present);
    }
    for (int c = 1; c <= spec.num_classes; ++c) EXPECT_GE(images_with[c], spec.samples_per_class) << c;
}

TEST(Synthetic, ImagesAreInUnitRangeAndShaped) {
    const Dataset d = generate_synthetic_dataset(small_spec(2));
    const SegSample s = d.sample(0);
    EXPECT_EQ(s.image.channels(), 3);
    EXPECT_EQ(s.image.height(), 64);
    EXPECT_TRUE(s.mask.same_extent(64, 64));
    for (double v : s.image.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Synthetic, InvalidSpecsAreConfigErrors) {
    SyntheticSpec s = small_spec();
    s.image_size = 8;
    EXPECT_THROW(generate_synthetic_dataset(s), ConfigError);
    s = small_spec();
    s.num_classes = 1;
    EXPECT_THROW(generate_synthetic_dataset(s), ConfigError);
    s = small_spec();
    s.samples_per_class = 0;
    EXPECT_THROW(generate_synthetic_dataset(s), ConfigError);
}

TEST(VocStyle, WriteThenLoadPreservesMasksAndImages) {
    const fs::path root = scratch("voc_roundtrip");
    const Dataset d = generate_synthetic_dataset(small_spec(1));
    write_voc_style(d, root);
    const Dataset back = load_voc_style(root, 6);
    ASSERT_EQ(back.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto j = back.find(d.id(i));
        ASSERT_TRUE(j.has_value());
        EXPECT_EQ(back.mask(*j), d.mask(i));
        const SegSample a = d.sample(i), b = back.sample(*j);
        for (std::size_t k = 0; k < a.image.size(); ++k) EXPECT_NEAR(a.image[k], b.image[k], 0.5 / 255.0 + 1e-12);
    }
    fs::remove_all(root);
}

TEST(VocStyle, ThreeSampleFolder) {
    const fs::path root = scratch("voc_three");
    std::vector<SegSample> samples;
    for (int i = 0; i < 3; ++i) {
        SegSample s{"s" + std::to_string(i), Image(3, 4, 4, 0.25 * i), LabelGrid(4, 4, static_cast<ClassId>(i))};
        samples.push_back(s);
    }
    write_voc_style(Dataset::from_samples(samples, 20), root);
    EXPECT_EQ(load_voc_style(root).size(), 3u);
    fs::remove_all(root);
}

TEST(VocStyle, IllegalMaskValueNamesTheFile) {
    const fs::path root = scratch("voc_bad");
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    write_png_rgb(root / "images" / "bad.png", Image(3, 4, 4));
    LabelGrid m(4, 4, 0);
    m(1, 1) = 254;
    write_png_labels(root / "masks" / "bad.png", m);
    try {
        (void)load_voc_style(root);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("bad.png"), std::string::npos);
    }
    fs::remove_all(root);
}

TEST(VocStyle, MissingMaskIsDataError) {
    const fs::path root = scratch("voc_missing");
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    write_png_rgb(root / "images" / "a.png", Image(3, 4, 4));
    EXPECT_THROW(load_voc_style(root), DataError);
    fs::remove_all(root);
}

TEST(VocStyle, EmptyFolderGivesEmptyDataset) {
    const fs::path root = scratch("voc_empty");
    EXPECT_TRUE(load_voc_style(root).empty());
    fs::remove_all(root);
    EXPECT_THROW(load_voc_style(root), DataError);
}

TEST(FromSamples, ExtentMismatchAndIllegalLabelsAreRejected) {
    std::vector<SegSample> bad{{"a", Image(3, 4, 4), LabelGrid(4, 5)}};
    EXPECT_THROW(Dataset::from_samples(bad, 6), DataError);
    std::vector<SegSample> illegal{{"a", Image(3, 4, 4), LabelGrid(4, 4, 7)}};
    EXPECT_THROW(Dataset::from_samples(illegal, 6), DataError);
}

TEST(Augment, FlipIsAnInvolution) {
    const Dataset d = generate_synthetic_dataset(small_spec(1));
    const SegSample s = d.sample(0);
    EXPECT_EQ(hflip(hflip(s)), s);
    EXPECT_NE(hflip(s).mask, s.mask);
}

TEST(Augment, IdentityGeometryReproducesInput) {
    const SegSample s = generate_synthetic_dataset(small_spec(1)).sample(2);
    AugmentParams p;
    p.out_height = 64;
    p.out_width = 64;
    EXPECT_EQ(apply_augment(s, p), s);
}

TEST(Augment, NoNewLabelValuesAndBoundedCounts) {
    const Dataset d = generate_synthetic_dataset(small_spec(2));
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const SegSample s = d.sample(seed % d.size());
        const auto params = sample_augment_params(64, 64, 64, 64, seed);
        const SegSample a = apply_augment(s, params);
        EXPECT_TRUE(a.mask.same_extent(64, 64));
        const auto before = histogram(s.mask);
        const auto after = histogram(a.mask);
        // Nearest-neighbour sampling at scale s repeats a source row or
        // column at most ceil(s) times, cropping only removes pixels.
        const double repeat = std::ceil(params.scale);
        for (int v = 0; v < 256; ++v) {
            if (v == kIgnoreId) continue;
            if (before[v] == 0) EXPECT_EQ(after[v], 0) << "new label " << v;
            EXPECT_LE(after[v], static_cast<long>(repeat * repeat) * before[v]);
        }
    }
}

TEST(Augment, ParamsAreSeedDeterministicAndInRange) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto a = sample_augment_params(64, 64, 64, 64, seed);
        EXPECT_EQ(a, sample_augment_params(64, 64, 64, 64, seed));
        EXPECT_GE(a.scale, 0.75);
        EXPECT_LE(a.scale, 1.25);
    }
}

TEST(Memory, SingleCarrierClassIsForced) {
    std::vector<SegSample> samples;
    for (int i = 0; i < 20; ++i) {
        LabelGrid m(4, 4, 0);
        m(0, 0) = static_cast<ClassId>(1 + i % 3);
        samples.push_back({"s" + std::to_string(i), Image(3, 4, 4), m});
    }
    LabelGrid rare(4, 4, 0);
    rare(2, 2) = 7;
    samples.push_back({"rare", Image(3, 4, 4), rare});
    const Dataset d = Dataset::from_samples(samples, 10);
    const std::vector<ClassId> seen{1, 2, 3, 7};
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const MemoryBank bank = sample_memory(d, seen, 4, seed);
        EXPECT_NE(std::find(bank.ids.begin(), bank.ids.end(), "rare"), bank.ids.end());
    }
}

TEST(Memory, CoverageAndCapacityOnSyntheticData) {
    SyntheticSpec spec;
    spec.num_classes = 20;
    spec.samples_per_class = 3;
    const Dataset d = generate_synthetic_dataset(spec);
    std::vector<ClassId> seen;
    for (int c = 1; c <= 15; ++c) seen.push_back(static_cast<ClassId>(c));
    const MemoryBank bank = sample_memory(d, seen, 20, 11);
    EXPECT_EQ(bank.indices.size(), 20u);
    std::set<ClassId> covered;
    for (std::size_t i : bank.indices) {
        for (ClassId c : d.classes_present(i)) covered.insert(c);
    }
    for (ClassId c : seen) EXPECT_TRUE(covered.contains(c)) << int(c);
    const MemoryBank again = sample_memory(d, seen, 20, 11);
    EXPECT_EQ(again.ids, bank.ids);
    std::set<std::size_t> unique(bank.indices.begin(), bank.indices.end());
    EXPECT_EQ(unique.size(), bank.indices.size());
}

TEST(Memory, CapacityBelowSeenIsBestEffort) {
    const Dataset d = generate_synthetic_dataset(small_spec(4));
    const std::vector<ClassId> seen{1, 2, 3, 4, 5, 6};
    const MemoryBank bank = sample_memory(d, seen, 2, 1);
    EXPECT_EQ(bank.indices.size(), 2u);
    EXPECT_THROW(sample_memory(d, seen, -1, 1), ConfigError);
}

TEST(Memory, ManifestListsIds) {
    const Dataset d = generate_synthetic_dataset(small_spec(2));
    const std::vector<ClassId> seen{1, 2};
    const MemoryBank bank = sample_memory(d, seen, 3, 4);
    const auto j = memory_manifest_entry(bank, 2);
    EXPECT_EQ(j.at("step"), 2);
    EXPECT_EQ(j.at("ids").get<std::vector<std::string>>(), bank.ids);
}

}  // namespace
}  // namespace coinseg

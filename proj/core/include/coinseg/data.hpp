#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coinseg/tensor.hpp"

namespace coinseg {

/// An image with its integer label mask.
struct SegSample {
    std::string id;
    Image image;     // 3 x H x W, values in [0,1]
    LabelGrid mask;  // H x W over {0 = c_u, 1..K, 255 = ignore}

    bool operator==(const SegSample&) const = default;
};

/// Indexed collection of samples. Masks stay resident (they are small and
/// needed for filtering); file-backed images are decoded on every access.
class Dataset {
  public:
    Dataset() = default;
    static Dataset from_samples(std::vector<SegSample> samples, int total_foreground_classes);

    [[nodiscard]] std::size_t size() const { return entries_.size(); }
    [[nodiscard]] bool empty() const { return entries_.empty(); }
    [[nodiscard]] int total_foreground_classes() const { return total_; }

    [[nodiscard]] const std::string& id(std::size_t i) const { return entries_.at(i).id; }
    [[nodiscard]] const LabelGrid& mask(std::size_t i) const { return entries_.at(i).mask; }
    /// Foreground ids with at least one pixel in sample i, ascending.
    [[nodiscard]] const std::vector<ClassId>& classes_present(std::size_t i) const {
        return entries_.at(i).present;
    }
    [[nodiscard]] SegSample sample(std::size_t i) const;
    [[nodiscard]] std::optional<std::size_t> find(const std::string& id) const;

  private:
    struct Entry {
        std::string id;
        LabelGrid mask;
        std::vector<ClassId> present;
        std::optional<Image> image;
        std::filesystem::path image_path;
    };
    friend Dataset load_voc_style(const std::filesystem::path&, int);

    void add(Entry entry);

    int total_ = 0;
    std::vector<Entry> entries_;
};

struct SyntheticSpec {
    int num_classes = 6;
    int samples_per_class = 40;
    int image_size = 64;
    std::uint64_t seed = 7;
};

/// Shapes benchmark: each class is a shape family with its own hue and
/// texture, 1-3 instances per image over a textured background. Every class
/// is the primary (fully visible) instance of exactly samples_per_class images.
Dataset generate_synthetic_dataset(const SyntheticSpec& spec);

/// Reads <root>/{images|JPEGImages}/*.png with masks from
/// <root>/{masks|SegmentationClass}/<stem>.png. Masks are validated eagerly.
Dataset load_voc_style(const std::filesystem::path& root, int total_foreground_classes = 20);

/// Writes images/ and masks/ PNG folders under root (created if absent).
void write_voc_style(const Dataset& dataset, const std::filesystem::path& root);

/// Geometry of one augmentation draw.
struct AugmentParams {
    bool flip = false;
    double scale = 1.0;
    int offset_y = 0;  // crop origin in the scaled frame; negative => padding
    int offset_x = 0;
    int out_height = 0;
    int out_width = 0;

    bool operator==(const AugmentParams&) const = default;
};

struct AugmentConfig {
    double flip_probability = 0.5;
    double min_scale = 0.75;
    double max_scale = 1.25;
    bool operator==(const AugmentConfig&) const = default;
};

AugmentParams sample_augment_params(int height, int width, int out_height, int out_width, std::uint64_t seed,
                                    const AugmentConfig& config = {});

/// Applies the geometry to image (bilinear) and mask (nearest). Pixels that
/// fall outside the scaled source become 0 in the image and ignore in the mask.
SegSample apply_augment(const SegSample& sample, const AugmentParams& params);

/// Nearest-neighbour warp of any label-like grid with the same geometry.
template <typename T>
Grid<T> warp_nearest(const Grid<T>& grid, const AugmentParams& params, T pad_value);

SegSample augment(const SegSample& sample, std::uint64_t seed, int out_height, int out_width,
                  const AugmentConfig& config = {});

SegSample hflip(const SegSample& sample);

/// Rehearsal exemplars; the dataset keeps the original full masks.
struct MemoryBank {
    int capacity = 0;
    std::vector<std::size_t> indices;
    std::vector<std::string> ids;
};

/// Random selection of at most `capacity` samples from `candidates`
/// (all samples when empty) such that every class in `seen` that has a
/// carrier image is represented at least once.
MemoryBank sample_memory(const Dataset& dataset, std::span<const ClassId> seen, int capacity, std::uint64_t seed,
                         std::span<const std::size_t> candidates = {});

nlohmann::json memory_manifest_entry(const MemoryBank& bank, int step);

}  // namespace coinseg

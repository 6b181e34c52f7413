#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "coinseg/tensor.hpp"

namespace coinseg {

class Dataset;

/// Assignment value for pixels that belong to no proposal (augmentation padding).
inline constexpr std::uint16_t kNoProposal = 0xFFFF;

/// N class-agnostic binary masks that partition the pixel grid, stored as a
/// per-pixel proposal index. Slots [region_count, N) are empty padding.
class MaskProposalSet {
  public:
    MaskProposalSet() = default;
    MaskProposalSet(int slots, Grid<std::uint16_t> assignment);

    [[nodiscard]] int slots() const { return slots_; }
    [[nodiscard]] int region_count() const { return regions_; }
    [[nodiscard]] int height() const { return assignment_.height(); }
    [[nodiscard]] int width() const { return assignment_.width(); }
    [[nodiscard]] const Grid<std::uint16_t>& assignment() const { return assignment_; }

    /// Binary mask of slot n (all zeros for padding slots).
    [[nodiscard]] Grid<std::uint8_t> mask(int n) const;
    [[nodiscard]] std::vector<Grid<std::uint8_t>> masks() const;

    bool operator==(const MaskProposalSet&) const = default;

  private:
    int slots_ = 0;
    int regions_ = 0;
    Grid<std::uint16_t> assignment_;
};

struct ProposalConfig {
    double k = 250.0;      // merge threshold scale, colour units 0..255
    int min_size = 16;     // components below this are absorbed by a neighbour
};

/// Deterministic graph-based over-segmentation (8-connected colour affinity)
/// reduced to at most N regions by merging the smallest region into its most
/// similar neighbour. Regions are numbered by first pixel in raster order.
MaskProposalSet generate_proposals(const Image& image, int slots = 100, const ProposalConfig& config = {});

/// Area-average pooling of a real grid to h x w (fractional cell overlaps allowed).
RealGrid area_downsample(const RealGrid& source, int height, int width);

/// Soft masks at feature resolution, one per slot. Per-cell sums stay 1
/// wherever the source pixels are assigned.
std::vector<RealGrid> downsample_masks(const MaskProposalSet& proposals, int height, int width);
std::vector<RealGrid> downsample_masks(const std::vector<Grid<std::uint8_t>>& masks, int height, int width);

/// Proposals for each sample id, persisted as a binary container of bitmasks.
class ProposalCache {
  public:
    void put(const std::string& id, MaskProposalSet proposals);
    [[nodiscard]] const MaskProposalSet& get(const std::string& id) const;
    [[nodiscard]] bool contains(const std::string& id) const { return entries_.contains(id); }
    [[nodiscard]] std::size_t size() const { return entries_.size(); }

    void save(const std::filesystem::path& path) const;
    static ProposalCache load(const std::filesystem::path& path);

    bool operator==(const ProposalCache&) const = default;

  private:
    std::map<std::string, MaskProposalSet> entries_;
};

/// Computes proposals for every sample; `workers` threads, result independent of it.
ProposalCache build_proposal_cache(const Dataset& dataset, int slots, const ProposalConfig& config = {},
                                   int workers = 1);

}  // namespace coinseg

#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "coinseg/tensor.hpp"

namespace coinseg {

class Dataset;

/// Label value for "not a current foreground class" (VOC background).
inline constexpr ClassId kUnknownId = 0;
/// Label value for unannotated pixels; excluded from every loss and metric.
inline constexpr ClassId kIgnoreId = 255;
inline constexpr int kMaxForegroundClasses = 254;

enum class SplitMode { overlapped, disjoint };

std::string to_string(SplitMode mode);
SplitMode parse_split_mode(std::string_view text);

/// Classes known at step t, plus the reserved sentinels.
struct LabelSpace {
    int step = 1;
    std::vector<ClassId> known_ids;
    ClassId unknown_id = kUnknownId;
    ClassId ignore_id = kIgnoreId;
};

/// Step-indexed incremental protocol. Immutable after construction.
class IncrementalScenario {
  public:
    IncrementalScenario(int total_foreground_classes, int base_count, int increment,
                        std::vector<ClassId> class_order, SplitMode mode);

    [[nodiscard]] int total_foreground_classes() const { return total_; }
    [[nodiscard]] int base_count() const { return base_; }
    [[nodiscard]] int increment() const { return increment_; }
    [[nodiscard]] int num_steps() const { return steps_; }
    [[nodiscard]] SplitMode mode() const { return mode_; }
    [[nodiscard]] const std::vector<ClassId>& class_order() const { return order_; }

    /// C^t, in class-order.
    [[nodiscard]] std::vector<ClassId> classes_at(int t) const;
    /// C^{1:t}.
    [[nodiscard]] std::vector<ClassId> seen_classes(int t) const;
    [[nodiscard]] LabelSpace label_space(int t) const;
    /// Step at which class `id` is introduced, 0 if `id` is not a foreground class.
    [[nodiscard]] int step_of(ClassId id) const;
    [[nodiscard]] bool is_foreground(ClassId id) const { return id >= 1 && id <= total_; }

    /// "X-Y", or "X" for a single-step (joint) scenario.
    [[nodiscard]] std::string spec_string() const;

    [[nodiscard]] nlohmann::json to_json() const;
    static IncrementalScenario from_json(const nlohmann::json& j);

    bool operator==(const IncrementalScenario&) const = default;

  private:
    void check_step(int t) const;

    int total_;
    int base_;
    int increment_;
    int steps_;
    std::vector<ClassId> order_;
    SplitMode mode_;
    std::vector<int> step_of_;  // indexed by class id
};

/// Parses "X-Y" into a scenario over foreground ids 1..total. X must be
/// strictly smaller than total; use joint_scenario() for one-step training.
IncrementalScenario parse_scenario(std::string_view spec, int total_foreground_classes,
                                   std::optional<std::vector<ClassId>> class_order = std::nullopt,
                                   SplitMode mode = SplitMode::overlapped);

/// T = 1: every class learned at once.
IncrementalScenario joint_scenario(int total_foreground_classes,
                                   std::optional<std::vector<ClassId>> class_order = std::nullopt,
                                   SplitMode mode = SplitMode::overlapped);

/// Seed-derived permutation of 1..total, for class-order robustness runs.
std::vector<ClassId> shuffled_class_order(int total_foreground_classes, std::uint64_t seed);

/// Keeps C^t ids, maps every other non-ignore pixel to c_u.
LabelGrid relabel_for_step(const LabelGrid& mask, const IncrementalScenario& scenario, int t);

/// Keeps ids in `keep`, maps every other non-ignore pixel to c_u.
LabelGrid relabel_keep(const LabelGrid& mask, std::span<const ClassId> keep, int total_foreground_classes);

/// Whether a sample with this (full-label) mask belongs to the step-t subset.
bool admit_for_step(const LabelGrid& mask, const IncrementalScenario& scenario, int t);

/// Indices of dataset samples admitted at step t (overlapped: any C^t pixel;
/// disjoint: additionally no pixel of a future class). Logs a warning when empty.
std::vector<std::size_t> filter_images_for_step(const Dataset& dataset, const IncrementalScenario& scenario,
                                                int t);

}  // namespace coinseg

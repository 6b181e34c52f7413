#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "coinseg/model.hpp"
#include "coinseg/scenario.hpp"
#include "coinseg/tensor.hpp"

namespace coinseg {

/// Rows are ground truth, columns prediction, over a fixed class list
/// (which includes c_u and never ignore).
class ConfusionMatrix {
  public:
    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::vector<ClassId> classes);

    [[nodiscard]] const std::vector<ClassId>& classes() const { return classes_; }
    [[nodiscard]] int size() const { return static_cast<int>(classes_.size()); }
    /// Matrix index of a class id, -1 when the id is not in the matrix.
    [[nodiscard]] int index_of(ClassId id) const { return index_[id]; }

    [[nodiscard]] std::uint64_t count(int gt_index, int pred_index) const {
        return counts_[static_cast<std::size_t>(gt_index) * classes_.size() + pred_index];
    }
    [[nodiscard]] std::uint64_t row_sum(int index) const;
    [[nodiscard]] std::uint64_t col_sum(int index) const;
    [[nodiscard]] std::uint64_t total() const;

    /// Adds every non-ignore pixel; throws DataError for labels outside the matrix.
    void accumulate(const LabelGrid& ground_truth, const LabelGrid& prediction);
    /// Element-wise sum with a matrix over the same classes.
    void merge(const ConfusionMatrix& other);

    bool operator==(const ConfusionMatrix&) const = default;

  private:
    std::vector<ClassId> classes_;
    std::vector<int> index_ = std::vector<int>(256, -1);
    std::vector<std::uint64_t> counts_;
};

/// diag / (row + col - diag); NaN when the class is absent from both.
double iou(const ConfusionMatrix& cm, ClassId id);

struct EvalOptions {
    bool unknown_as_background = true;  // c_u takes part in base and all means
    int workers = 1;
};

struct MetricsRecord {
    int step = 0;
    std::map<int, double> class_iou;  // class id -> IoU (NaN when undefined)
    double base_miou = 0.0;           // C^1 (+ c_u)
    double novel_miou = 0.0;          // C^{2:t}; NaN at t = 1
    double all_miou = 0.0;            // C^{1:t} (+ c_u)
    bool unknown_as_background = true;

    [[nodiscard]] nlohmann::json to_json() const;
    static MetricsRecord from_json(const nlohmann::json& j);
    /// Exact equality with NaN == NaN.
    bool operator==(const MetricsRecord& other) const;
};

/// Mean over the defined IoUs of the ids; NaN when none is defined.
double mean_defined(const ConfusionMatrix& cm, std::span<const ClassId> ids);

MetricsRecord grouped_miou(const ConfusionMatrix& cm, const IncrementalScenario& scenario, int t,
                           const EvalOptions& options = {});

/// Predicts every validation sample (images resized to the model input),
/// with ground truth relabeled so unseen classes become c_u.
ConfusionMatrix confusion_for_step(const SegModel& model, const Dataset& validation,
                                   const IncrementalScenario& scenario, int t, const EvalOptions& options = {});

MetricsRecord evaluate(const SegModel& model, const Dataset& validation, const IncrementalScenario& scenario, int t,
                       const EvalOptions& options = {});

/// Writes one row per record to `csv_path` (step, all, base, novel) and a
/// line plot of all-seen mIoU against step to `svg_path`.
void emit_curves(std::span<const MetricsRecord> records, const std::filesystem::path& csv_path,
                 const std::filesystem::path& svg_path);

struct CurvePoint {
    int step = 0;
    double all_miou = 0.0;
    double base_miou = 0.0;
    double novel_miou = 0.0;
};
std::vector<CurvePoint> read_curves(const std::filesystem::path& csv_path);

}  // namespace coinseg

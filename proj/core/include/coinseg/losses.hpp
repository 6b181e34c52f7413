#pragma once

#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "coinseg/model.hpp"
#include "coinseg/proposals.hpp"
#include "coinseg/tensor.hpp"

namespace coinseg {

// ---------------------------------------------------------------------------
// Pseudo-labels

/// Previous-step prediction: per-pixel argmax and sigmoid confidence.
struct PreviousPrediction {
    LabelGrid labels;
    RealGrid confidence;
};

/// Argmax over channels (lowest channel index wins ties) and max sigmoid.
PreviousPrediction predict_from_logits(const LogitMap& logits);

/// Runs the frozen previous-step model; only meaningful for t > 1.
PreviousPrediction predict_previous(const FrozenModel& previous, const Image& image, int step);

/// Mixes current ground truth with confident previous predictions: c_u
/// pixels take the previous label when its confidence is >= tau; ignore
/// pixels and every other label pass through unchanged.
LabelGrid mix_labels(const LabelGrid& labels, const LabelGrid& previous_labels, const RealGrid& confidence,
                     double tau = 0.7);

// ---------------------------------------------------------------------------
// Prototypes and contrastive losses

/// A soft mask at feature resolution with the identifier it pools under.
struct SoftMask {
    int id = 0;
    RealGrid weights;
};

enum class PrototypeKind { inter, intra };

struct Prototype {
    int id = 0;
    std::vector<double> vector;
};

struct PrototypeSet {
    PrototypeKind kind = PrototypeKind::inter;
    std::vector<Prototype> entries;

    [[nodiscard]] std::size_t size() const { return entries.size(); }
    [[nodiscard]] bool empty() const { return entries.empty(); }
};

/// Mass-weighted feature centroid of each mask; zero-mass masks are omitted.
PrototypeSet masked_average_pool(const FeatureMap& features, std::span<const SoftMask> masks,
                                 PrototypeKind kind = PrototypeKind::inter);

struct ContrastiveOptions {
    bool normalize = true;  // L2-normalize prototypes before the inner product
};

struct ContrastiveResult {
    double loss = 0.0;
    bool skipped = true;     // no usable anchor
    int anchors = 0;         // K after dropping empty / degenerate masks
    FeatureMap gradient;     // dL/dM^t; empty unless requested
};

/// CON over prototype pairs: anchors current[i], positives previous[i], pool
/// ordered current then previous with only the anchor itself excluded.
double contrastive_from_prototypes(std::span<const std::vector<double>> current,
                                   std::span<const std::vector<double>> previous, const ContrastiveOptions& options = {});

/// CON(masks, M^t, M^{t-1}): pools both maps under the same masks. Gradient
/// flows only into M^t; M^{t-1} is a constant.
ContrastiveResult contrastive_con(std::span<const SoftMask> masks, const FeatureMap& current,
                                  const FeatureMap& previous, const ContrastiveOptions& options = {},
                                  bool want_gradient = false);

/// Per-class soft masks of a label grid at feature resolution. c_u and
/// ignore are excluded, as are classes whose pooled mass is below one cell.
std::vector<SoftMask> class_soft_masks(const LabelGrid& labels, int height, int width);

/// Soft masks of the non-empty proposals at feature resolution.
std::vector<SoftMask> proposal_soft_masks(const MaskProposalSet& proposals, int height, int width);

ContrastiveResult inter_class_loss(const LabelGrid& pseudo_labels, const FeatureMap& current,
                                   const FeatureMap& previous, const ContrastiveOptions& options = {},
                                   bool want_gradient = false);

ContrastiveResult intra_class_loss(const MaskProposalSet& proposals, const FeatureMap& current,
                                   const FeatureMap& previous, const ContrastiveOptions& options = {},
                                   bool want_gradient = false);

// ---------------------------------------------------------------------------
// Distillation and supervision

/// A scalar loss with its gradient w.r.t. the first argument.
struct LossValue {
    double loss = 0.0;
    bool skipped = false;
    Tensor gradient;
};

/// Mean squared difference over channels and pixels.
LossValue feature_kd(const FeatureMap& current, const FeatureMap& previous, bool want_gradient = false);

/// z-hat: old channels copied, the c_u channel replaced by the sum of the
/// current-step channels, restricted to C^{1:t-1} and c_u (in z's order).
LogitMap remodel_logits(const LogitMap& logits, std::span<const ClassId> current_classes);

/// Maps dL/dz-hat back to dL/dz (the original c_u channel receives zero).
Tensor remodel_logits_backward(const LogitMap& logits, std::span<const ClassId> current_classes,
                               const Tensor& remodeled_gradient);

/// Cross-entropy of the student softmax(z-hat) against the teacher
/// softmax(z^{t-1}), scaled by 1/|channels| and averaged over pixels.
LossValue logit_kd(const LogitMap& remodeled, const LogitMap& teacher, bool want_gradient = false);

/// Mean binary cross-entropy of sigmoid(z) against the one-hot target over
/// all channels and non-ignored pixels.
LossValue bce_seg(const LogitMap& logits, const LabelGrid& labels, bool want_gradient = false);

// ---------------------------------------------------------------------------
// Objective

struct LossComponents {
    double bce = 0.0;
    double inter = 0.0;
    double intra = 0.0;
    double feature_kd = 0.0;
    double logit_kd = 0.0;
};

struct LossBreakdown {
    double bce = 0.0;
    double inter = 0.0;
    double intra = 0.0;
    double contrastive = 0.0;
    double feature_kd = 0.0;
    double logit_kd = 0.0;
    double regularization = 0.0;
    double total = 0.0;
    double lambda_c = 0.0;
    double lambda_r = 0.0;

    [[nodiscard]] nlohmann::json to_json() const;
    static LossBreakdown from_json(const nlohmann::json& j);
    bool operator==(const LossBreakdown&) const = default;
};

/// L = BCE + lambda_c (L_int + L_itr) + lambda_r (L^F_kd + L^z_kd). Throws
/// TrainingError naming the first non-finite component.
LossBreakdown total_objective(const LossComponents& components, double lambda_c = 0.01, double lambda_r = 0.1);

}  // namespace coinseg

#include "coinseg/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "coinseg/errors.hpp"
#include "coinseg/scenario.hpp"

namespace coinseg {
namespace {

constexpr double kDegenerateNorm = 1e-12;

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DataError(fmt::format("{}: shape mismatch ({}x{}x{} vs {}x{}x{})", what, a.channels(), a.height(),
                                    a.width(), b.channels(), b.height(), b.width()));
    }
}

/// CON on already-paired prototypes. `current_grad`, when non-null, receives
/// dL/dcurrent[i] for every pair (rows of zeros for dropped pairs).
double con_core(std::span<const std::vector<double>> current, std::span<const std::vector<double>> previous,
                const ContrastiveOptions& options, std::vector<std::vector<double>>* current_grad, int* used) {
    if (current.size() != previous.size()) throw DataError("contrastive: prototype counts differ between steps");
    const std::size_t dim = current.empty() ? 0 : current.front().size();

    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < current.size(); ++i) {
        if (current[i].size() != dim || previous[i].size() != dim) {
            throw DataError("contrastive: prototype dimensions differ");
        }
        if (options.normalize && (norm(current[i]) < kDegenerateNorm || norm(previous[i]) < kDegenerateNorm)) continue;
        keep.push_back(i);
    }
    const std::size_t k = keep.size();
    if (used) *used = static_cast<int>(k);
    if (current_grad) current_grad->assign(current.size(), std::vector<double>(dim, 0.0));
    if (k < 2) return 0.0;

    // Pool entries u_0..u_{K-1} are the anchors a, u_K..u_{2K-1} the positives b.
    std::vector<std::vector<double>> pool(2 * k);
    std::vector<double> anchor_norm(k, 1.0);
    for (std::size_t i = 0; i < k; ++i) {
        pool[i] = current[keep[i]];
        pool[k + i] = previous[keep[i]];
        if (options.normalize) {
            anchor_norm[i] = norm(pool[i]);
            const double nb = norm(pool[k + i]);
            for (double& v : pool[i]) v /= anchor_norm[i];
            for (double& v : pool[k + i]) v /= nb;
        }
    }

    double loss = 0.0;
    std::vector<std::vector<double>> weights(k, std::vector<double>(2 * k, 0.0));
    for (std::size_t i = 0; i < k; ++i) {
        std::vector<double> s(2 * k, -std::numeric_limits<double>::infinity());
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < 2 * k; ++j) {
            if (j == i) continue;
            s[j] = dot(pool[i], pool[j]);
            peak = std::max(peak, s[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < 2 * k; ++j) {
            if (j != i) z += std::exp(s[j] - peak);
        }
        for (std::size_t j = 0; j < 2 * k; ++j) {
            if (j != i) weights[i][j] = std::exp(s[j] - peak) / z;
        }
        loss += -s[k + i] + peak + std::log(z);
    }
    loss /= static_cast<double>(k);

    if (current_grad) {
        const double inv_k = 1.0 / static_cast<double>(k);
        for (std::size_t i = 0; i < k; ++i) {
            std::vector<double> g(dim, 0.0);
            for (std::size_t d = 0; d < dim; ++d) g[d] = -pool[k + i][d];
            for (std::size_t j = 0; j < 2 * k; ++j) {
                if (j == i) continue;
                for (std::size_t d = 0; d < dim; ++d) g[d] += weights[i][j] * pool[j][d];
            }
            // a_i also sits in the pool of every other anchor.
            for (std::size_t m = 0; m < k; ++m) {
                if (m == i) continue;
                for (std::size_t d = 0; d < dim; ++d) g[d] += weights[m][i] * pool[m][d];
            }
            for (double& v : g) v *= inv_k;
            if (options.normalize) {
                const double proj = dot(g, pool[i]);
                for (std::size_t d = 0; d < dim; ++d) g[d] = (g[d] - proj * pool[i][d]) / anchor_norm[i];
            }
            (*current_grad)[keep[i]] = std::move(g);
        }
    }
    return loss;
}

std::vector<double> pool_one(const FeatureMap& features, const RealGrid& weights, double mass) {
    std::vector<double> p(static_cast<std::size_t>(features.channels()), 0.0);
    for (int c = 0; c < features.channels(); ++c) {
        const auto plane = features.channel(c);
        double s = 0.0;
        for (std::size_t x = 0; x < plane.size(); ++x) s += weights[x] * plane[x];
        p[static_cast<std::size_t>(c)] = s / mass;
    }
    return p;
}

double mask_mass(const RealGrid& w) {
    double s = 0.0;
    for (double v : w.values()) s += v;
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------

PreviousPrediction predict_from_logits(const LogitMap& logits) {
    const auto& z = logits.values;
    PreviousPrediction out{predict_labels(logits), RealGrid(z.height(), z.width())};
    const int plane = z.plane();
    for (int p = 0; p < plane; ++p) {
        double best = z[static_cast<std::size_t>(p)];
        for (int c = 1; c < z.channels(); ++c) best = std::max(best, z[static_cast<std::size_t>(c) * plane + p]);
        // sigmoid is monotone, so the max of sigmoids is the sigmoid of the max.
        out.confidence[static_cast<std::size_t>(p)] = sigmoid(best);
    }
    return out;
}

PreviousPrediction predict_previous(const FrozenModel& previous, const Image& image, int step) {
    if (step <= 1) throw ConfigError("previous-step prediction requested at step 1, where no previous model exists");
    return predict_from_logits(previous.forward(image).logits);
}

LabelGrid mix_labels(const LabelGrid& labels, const LabelGrid& previous_labels, const RealGrid& confidence,
                     double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError(fmt::format("pseudo-label threshold must lie in (0,1), got {}", tau));
    if (!labels.same_extent(previous_labels) || !labels.same_extent(confidence)) {
        throw DataError("mix_labels: label, prediction and confidence grids differ in extent");
    }
    LabelGrid out = labels;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (labels[i] == kUnknownId && confidence[i] >= tau) out[i] = previous_labels[i];
    }
    return out;
}

// ---------------------------------------------------------------------------

PrototypeSet masked_average_pool(const FeatureMap& features, std::span<const SoftMask> masks, PrototypeKind kind) {
    PrototypeSet set{kind, {}};
    for (const auto& m : masks) {
        if (!m.weights.same_extent(features.height(), features.width())) {
            throw DataError("masked_average_pool: mask and feature extents differ");
        }
        const double mass = mask_mass(m.weights);
        if (mass <= 0.0) continue;
        set.entries.push_back({m.id, pool_one(features, m.weights, mass)});
    }
    return set;
}

double contrastive_from_prototypes(std::span<const std::vector<double>> current,
                                   std::span<const std::vector<double>> previous, const ContrastiveOptions& options) {
    return con_core(current, previous, options, nullptr, nullptr);
}

ContrastiveResult contrastive_con(std::span<const SoftMask> masks, const FeatureMap& current,
                                  const FeatureMap& previous, const ContrastiveOptions& options, bool want_gradient) {
    require_same_shape(current, previous, "contrastive_con");
    std::vector<const SoftMask*> used;
    std::vector<double> masses;
    std::vector<std::vector<double>> p, q;
    for (const auto& m : masks) {
        if (!m.weights.same_extent(current.height(), current.width())) {
            throw DataError("contrastive_con: mask and feature extents differ");
        }
        const double mass = mask_mass(m.weights);
        if (mass <= 0.0) continue;
        used.push_back(&m);
        masses.push_back(mass);
        p.push_back(pool_one(current, m.weights, mass));
        q.push_back(pool_one(previous, m.weights, mass));
    }

    ContrastiveResult result;
    std::vector<std::vector<double>> grads;
    result.loss = con_core(p, q, options, want_gradient ? &grads : nullptr, &result.anchors);
    result.skipped = result.anchors < 2;
    if (!want_gradient) return result;

    result.gradient = FeatureMap(current.channels(), current.height(), current.width());
    for (std::size_t k = 0; k < used.size(); ++k) {
        const auto& w = used[k]->weights;
        for (int c = 0; c < current.channels(); ++c) {
            const double g = grads[k][static_cast<std::size_t>(c)] / masses[k];
            if (g == 0.0) continue;
            auto plane = result.gradient.channel(c);
            for (std::size_t x = 0; x < plane.size(); ++x) plane[x] += w[x] * g;
        }
    }
    return result;
}

std::vector<SoftMask> class_soft_masks(const LabelGrid& labels, int height, int width) {
    std::array<bool, 256> present{};
    for (ClassId v : labels.values()) present[v] = true;
    std::vector<SoftMask> out;
    for (int id = 1; id < 256; ++id) {
        if (!present[static_cast<std::size_t>(id)] || id == kIgnoreId) continue;
        RealGrid indicator(labels.height(), labels.width());
        for (std::size_t i = 0; i < labels.size(); ++i) indicator[i] = labels[i] == id ? 1.0 : 0.0;
        RealGrid soft = area_downsample(indicator, height, width);
        if (mask_mass(soft) < 1.0) continue;
        out.push_back({id, std::move(soft)});
    }
    return out;
}

std::vector<SoftMask> proposal_soft_masks(const MaskProposalSet& proposals, int height, int width) {
    auto grids = downsample_masks(proposals, height, width);
    std::vector<SoftMask> out;
    for (std::size_t n = 0; n < grids.size(); ++n) {
        if (mask_mass(grids[n]) <= 0.0) continue;
        out.push_back({static_cast<int>(n), std::move(grids[n])});
    }
    return out;
}

ContrastiveResult inter_class_loss(const LabelGrid& pseudo_labels, const FeatureMap& current,
                                   const FeatureMap& previous, const ContrastiveOptions& options, bool want_gradient) {
    const auto masks = class_soft_masks(pseudo_labels, current.height(), current.width());
    return contrastive_con(masks, current, previous, options, want_gradient);
}

ContrastiveResult intra_class_loss(const MaskProposalSet& proposals, const FeatureMap& current,
                                   const FeatureMap& previous, const ContrastiveOptions& options, bool want_gradient) {
    const auto masks = proposal_soft_masks(proposals, current.height(), current.width());
    return contrastive_con(masks, current, previous, options, want_gradient);
}

// ---------------------------------------------------------------------------

LossValue feature_kd(const FeatureMap& current, const FeatureMap& previous, bool want_gradient) {
    require_same_shape(current, previous, "feature_kd");
    LossValue out;
    const double n = static_cast<double>(current.size());
    if (n == 0) {
        out.skipped = true;
        return out;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < current.size(); ++i) {
        const double d = current[i] - previous[i];
        s += d * d;
    }
    out.loss = s / n;
    if (want_gradient) {
        out.gradient = Tensor(current.channels(), current.height(), current.width());
        for (std::size_t i = 0; i < current.size(); ++i) out.gradient[i] = 2.0 * (current[i] - previous[i]) / n;
    }
    return out;
}

LogitMap remodel_logits(const LogitMap& logits, std::span<const ClassId> current_classes) {
    if (current_classes.empty()) throw ConfigError("remodel_logits: current class set is empty");
    if (logits.channel_of(kUnknownId) != 0) throw DataError("remodel_logits: channel 0 must be c_u");
    std::vector<int> current_channels;
    for (ClassId id : current_classes) {
        const int c = logits.channel_of(id);
        if (c < 0) throw DataError(fmt::format("remodel_logits: no channel for current class {}", id));
        current_channels.push_back(c);
    }
    const auto& z = logits.values;
    std::vector<int> kept;
    LogitMap out;
    for (int c = 0; c < z.channels(); ++c) {
        if (std::find(current_channels.begin(), current_channels.end(), c) != current_channels.end()) continue;
        kept.push_back(c);
        out.channel_ids.push_back(logits.channel_ids[static_cast<std::size_t>(c)]);
    }
    out.values = Tensor(static_cast<int>(kept.size()), z.height(), z.width());
    for (std::size_t k = 0; k < kept.size(); ++k) {
        auto dst = out.values.channel(static_cast<int>(k));
        if (kept[k] == 0) {
            for (int c : current_channels) {
                const auto src = z.channel(c);
                for (std::size_t x = 0; x < dst.size(); ++x) dst[x] += src[x];
            }
        } else {
            const auto src = z.channel(kept[k]);
            std::copy(src.begin(), src.end(), dst.begin());
        }
    }
    return out;
}

Tensor remodel_logits_backward(const LogitMap& logits, std::span<const ClassId> current_classes,
                               const Tensor& remodeled_gradient) {
    const auto& z = logits.values;
    Tensor dz(z.channels(), z.height(), z.width());
    std::vector<bool> is_current(static_cast<std::size_t>(z.channels()), false);
    for (ClassId id : current_classes) {
        const int c = logits.channel_of(id);
        if (c < 0) throw DataError(fmt::format("remodel_logits_backward: no channel for current class {}", id));
        is_current[static_cast<std::size_t>(c)] = true;
    }
    int k = 0;
    for (int c = 0; c < z.channels(); ++c) {
        if (is_current[static_cast<std::size_t>(c)]) continue;
        if (k >= remodeled_gradient.channels()) throw DataError("remodel_logits_backward: gradient has too few channels");
        const auto src = remodeled_gradient.channel(k);
        if (c == 0) {
            for (int j = 0; j < z.channels(); ++j) {
                if (!is_current[static_cast<std::size_t>(j)]) continue;
                auto dst = dz.channel(j);
                for (std::size_t x = 0; x < dst.size(); ++x) dst[x] += src[x];
            }
        } else {
            auto dst = dz.channel(c);
            std::copy(src.begin(), src.end(), dst.begin());
        }
        ++k;
    }
    return dz;
}

LossValue logit_kd(const LogitMap& remodeled, const LogitMap& teacher, bool want_gradient) {
    require_same_shape(remodeled.values, teacher.values, "logit_kd");
    if (remodeled.channel_ids != teacher.channel_ids) throw DataError("logit_kd: student and teacher channel sets differ");
    const auto& zs = remodeled.values;
    const auto& zt = teacher.values;
    const int n = zs.channels();
    const int plane = zs.plane();
    LossValue out;
    if (n == 0 || plane == 0) {
        out.skipped = true;
        return out;
    }
    const double scale = 1.0 / (static_cast<double>(n) * plane);
    if (want_gradient) out.gradient = Tensor(n, zs.height(), zs.width());
    std::vector<double> q(static_cast<std::size_t>(n)), lp(static_cast<std::size_t>(n));
    double total = 0.0;
    for (int x = 0; x < plane; ++x) {
        double mt = -std::numeric_limits<double>::infinity();
        double ms = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < n; ++c) {
            mt = std::max(mt, zt[static_cast<std::size_t>(c) * plane + x]);
            ms = std::max(ms, zs[static_cast<std::size_t>(c) * plane + x]);
        }
        double st = 0.0, ss = 0.0;
        for (int c = 0; c < n; ++c) {
            st += std::exp(zt[static_cast<std::size_t>(c) * plane + x] - mt);
            ss += std::exp(zs[static_cast<std::size_t>(c) * plane + x] - ms);
        }
        const double log_ss = std::log(ss);
        for (int c = 0; c < n; ++c) {
            const auto i = static_cast<std::size_t>(c);
            q[i] = std::exp(zt[i * plane + x] - mt) / st;
            lp[i] = zs[i * plane + x] - ms - log_ss;
            total -= q[i] * lp[i];
        }
        if (want_gradient) {
            for (int c = 0; c < n; ++c) {
                const auto i = static_cast<std::size_t>(c);
                out.gradient[i * plane + x] = (std::exp(lp[i]) - q[i]) * scale;
            }
        }
    }
    out.loss = total * scale;
    return out;
}

LossValue bce_seg(const LogitMap& logits, const LabelGrid& labels, bool want_gradient) {
    const auto& z = logits.values;
    if (!labels.same_extent(z.height(), z.width())) throw DataError("bce_seg: label and logit extents differ");
    const int k = z.channels();
    const int plane = z.plane();

    std::array<int, 256> channel_of{};
    channel_of.fill(-1);
    for (int c = 0; c < k; ++c) channel_of[logits.channel_ids[static_cast<std::size_t>(c)]] = c;

    std::size_t valid = 0;
    for (std::size_t x = 0; x < labels.size(); ++x) {
        const ClassId y = labels[x];
        if (y == kIgnoreId) continue;
        if (channel_of[y] < 0) throw DataError(fmt::format("bce_seg: label {} has no logit channel", y));
        ++valid;
    }
    LossValue out;
    if (want_gradient) out.gradient = Tensor(k, z.height(), z.width());
    if (valid == 0 || k == 0) {
        out.skipped = true;
        return out;
    }
    const double scale = 1.0 / (static_cast<double>(valid) * k);
    double total = 0.0;
    for (int x = 0; x < plane; ++x) {
        const ClassId y = labels[static_cast<std::size_t>(x)];
        if (y == kIgnoreId) continue;
        const int target = channel_of[y];
        for (int c = 0; c < k; ++c) {
            const std::size_t i = static_cast<std::size_t>(c) * plane + x;
            const double t = c == target ? 1.0 : 0.0;
            total += softplus(z[i]) - t * z[i];
            if (want_gradient) out.gradient[i] = (sigmoid(z[i]) - t) * scale;
        }
    }
    out.loss = total * scale;
    return out;
}

// ---------------------------------------------------------------------------

nlohmann::json LossBreakdown::to_json() const {
    return {{"L_BCE", bce},          {"L_int", inter},        {"L_itr", intra},   {"L_ct", contrastive},
            {"L_kd_F", feature_kd},  {"L_kd_z", logit_kd},    {"L_reg", regularization},
            {"L_total", total},      {"lambda_c", lambda_c},  {"lambda_r", lambda_r}};
}

LossBreakdown LossBreakdown::from_json(const nlohmann::json& j) {
    LossBreakdown b;
    b.bce = j.at("L_BCE").get<double>();
    b.inter = j.at("L_int").get<double>();
    b.intra = j.at("L_itr").get<double>();
    b.contrastive = j.at("L_ct").get<double>();
    b.feature_kd = j.at("L_kd_F").get<double>();
    b.logit_kd = j.at("L_kd_z").get<double>();
    b.regularization = j.at("L_reg").get<double>();
    b.total = j.at("L_total").get<double>();
    b.lambda_c = j.at("lambda_c").get<double>();
    b.lambda_r = j.at("lambda_r").get<double>();
    return b;
}

LossBreakdown total_objective(const LossComponents& c, double lambda_c, double lambda_r) {
    const std::pair<const char*, double> parts[] = {
        {"L_BCE", c.bce}, {"L_int", c.inter}, {"L_itr", c.intra}, {"L_kd_F", c.feature_kd}, {"L_kd_z", c.logit_kd}};
    for (const auto& [name, value] : parts) {
        if (!std::isfinite(value)) throw TrainingError(fmt::format("loss component {} is not finite ({})", name, value));
    }
    if (!std::isfinite(lambda_c) || !std::isfinite(lambda_r) || lambda_c < 0 || lambda_r < 0) {
        throw ConfigError("loss weights must be finite and non-negative");
    }
    LossBreakdown b;
    b.bce = c.bce;
    b.inter = c.inter;
    b.intra = c.intra;
    b.feature_kd = c.feature_kd;
    b.logit_kd = c.logit_kd;
    b.contrastive = c.inter + c.intra;
    b.regularization = c.feature_kd + c.logit_kd;
    b.total = c.bce + lambda_c * b.contrastive + lambda_r * b.regularization;
    b.lambda_c = lambda_c;
    b.lambda_r = lambda_r;
    return b;
}

}  // namespace coinseg

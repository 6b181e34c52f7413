#include "coinseg/scenario.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "coinseg/data.hpp"
#include "coinseg/errors.hpp"
#include "coinseg/rng.hpp"

namespace coinseg {
namespace {

int parse_count(std::string_view text, std::string_view whole) {
    int value = 0;
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (text.empty() || ec != std::errc{} || ptr != end) {
        throw ConfigError(fmt::format("malformed scenario spec '{}': expected X-Y", whole));
    }
    return value;
}

std::vector<ClassId> resolve_order(int total, std::optional<std::vector<ClassId>> order) {
    if (!order) {
        std::vector<ClassId> ids(static_cast<std::size_t>(total));
        std::iota(ids.begin(), ids.end(), ClassId{1});
        return ids;
    }
    return std::move(*order);
}

void validate_label(ClassId v, int total) {
    if (v != kIgnoreId && v != kUnknownId && (v < 1 || v > total)) {
        throw DataError(fmt::format("label value {} is outside the label space (0..{}, 255)", v, total));
    }
}

}  // namespace

std::string to_string(SplitMode mode) {
    return mode == SplitMode::overlapped ? "overlapped" : "disjoint";
}

SplitMode parse_split_mode(std::string_view text) {
    if (text == "overlapped") return SplitMode::overlapped;
    if (text == "disjoint") return SplitMode::disjoint;
    throw ConfigError(fmt::format("unknown split mode '{}'", text));
}

IncrementalScenario::IncrementalScenario(int total_foreground_classes, int base_count, int increment,
                                         std::vector<ClassId> class_order, SplitMode mode)
    : total_(total_foreground_classes),
      base_(base_count),
      increment_(increment),
      steps_(1),
      order_(std::move(class_order)),
      mode_(mode) {
    if (total_ < 1 || total_ > kMaxForegroundClasses) {
        throw ConfigError(fmt::format("total foreground classes must be in [1, {}], got {}",
                                      kMaxForegroundClasses, total_));
    }
    if (base_ < 1) throw ConfigError("base class count X must be >= 1");
    if (base_ > total_) {
        throw ConfigError(fmt::format("base class count {} exceeds total {}", base_, total_));
    }
    if (base_ < total_) {
        if (increment_ < 1) throw ConfigError("increment Y must be >= 1");
        if ((total_ - base_) % increment_ != 0) {
            throw ConfigError(fmt::format("(total - X) = {} is not divisible by Y = {}", total_ - base_, increment_));
        }
        steps_ = 1 + (total_ - base_) / increment_;
    } else {
        increment_ = 0;
    }
    if (static_cast<int>(order_.size()) != total_) {
        throw ConfigError(fmt::format("class order has {} entries, expected {}", order_.size(), total_));
    }
    step_of_.assign(256, 0);
    for (std::size_t pos = 0; pos < order_.size(); ++pos) {
        const ClassId id = order_[pos];
        if (!is_foreground(id) || step_of_[id] != 0) {
            throw ConfigError("class order must be a permutation of 1..total");
        }
        const int p = static_cast<int>(pos);
        step_of_[id] = p < base_ ? 1 : 2 + (p - base_) / increment_;
    }
}

void IncrementalScenario::check_step(int t) const {
    if (t < 1 || t > steps_) {
        throw ConfigError(fmt::format("step {} out of range [1, {}]", t, steps_));
    }
}

std::vector<ClassId> IncrementalScenario::classes_at(int t) const {
    check_step(t);
    const int begin = t == 1 ? 0 : base_ + (t - 2) * increment_;
    const int end = t == 1 ? base_ : begin + increment_;
    return {order_.begin() + begin, order_.begin() + end};
}

std::vector<ClassId> IncrementalScenario::seen_classes(int t) const {
    check_step(t);
    const int end = base_ + (t - 1) * increment_;
    return {order_.begin(), order_.begin() + end};
}

LabelSpace IncrementalScenario::label_space(int t) const {
    return LabelSpace{t, seen_classes(t), kUnknownId, kIgnoreId};
}

int IncrementalScenario::step_of(ClassId id) const { return step_of_[id]; }

std::string IncrementalScenario::spec_string() const {
    if (steps_ == 1) return std::to_string(base_);
    return fmt::format("{}-{}", base_, increment_);
}

nlohmann::json IncrementalScenario::to_json() const {
    std::vector<int> order(order_.begin(), order_.end());
    return {{"spec", spec_string()},
            {"total_foreground_classes", total_},
            {"base_count", base_},
            {"increment", increment_},
            {"num_steps", steps_},
            {"class_order", order},
            {"mode", to_string(mode_)},
            {"unknown_id", kUnknownId},
            {"ignore_id", kIgnoreId}};
}

IncrementalScenario IncrementalScenario::from_json(const nlohmann::json& j) {
    try {
        std::vector<ClassId> order;
        for (int v : j.at("class_order").get<std::vector<int>>()) {
            if (v < 1 || v > kMaxForegroundClasses) throw ConfigError("class order entry out of range");
            order.push_back(static_cast<ClassId>(v));
        }
        IncrementalScenario s(j.at("total_foreground_classes").get<int>(), j.at("base_count").get<int>(),
                              j.at("increment").get<int>(), std::move(order),
                              parse_split_mode(j.at("mode").get<std::string>()));
        if (j.contains("num_steps") && j.at("num_steps").get<int>() != s.num_steps()) {
            throw ConfigError("scenario manifest num_steps disagrees with X/Y");
        }
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("invalid scenario manifest: {}", e.what()));
    }
}

IncrementalScenario parse_scenario(std::string_view spec, int total_foreground_classes,
                                   std::optional<std::vector<ClassId>> class_order, SplitMode mode) {
    const auto dash = spec.find('-');
    if (dash == std::string_view::npos) {
        throw ConfigError(fmt::format("malformed scenario spec '{}': expected X-Y", spec));
    }
    const int base = parse_count(spec.substr(0, dash), spec);
    const int inc = parse_count(spec.substr(dash + 1), spec);
    if (base < 1 || inc < 1) {
        throw ConfigError(fmt::format("scenario '{}': X and Y must both be >= 1", spec));
    }
    if (base >= total_foreground_classes) {
        throw ConfigError(fmt::format("scenario '{}': X must be smaller than the {} foreground classes "
                                      "(use a joint scenario for single-step training)",
                                      spec, total_foreground_classes));
    }
    return IncrementalScenario(total_foreground_classes, base, inc,
                               resolve_order(total_foreground_classes, std::move(class_order)), mode);
}

IncrementalScenario joint_scenario(int total_foreground_classes, std::optional<std::vector<ClassId>> class_order,
                                   SplitMode mode) {
    return IncrementalScenario(total_foreground_classes, total_foreground_classes, 0,
                               resolve_order(total_foreground_classes, std::move(class_order)), mode);
}

std::vector<ClassId> shuffled_class_order(int total_foreground_classes, std::uint64_t seed) {
    auto order = resolve_order(total_foreground_classes, std::nullopt);
    Rng rng(derive_seed(seed, "class_order"));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

LabelGrid relabel_keep(const LabelGrid& mask, std::span<const ClassId> keep, int total_foreground_classes) {
    std::array<bool, 256> kept{};
    for (ClassId id : keep) kept[id] = true;
    LabelGrid out(mask.height(), mask.width());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const ClassId v = mask[i];
        validate_label(v, total_foreground_classes);
        out[i] = (v == kIgnoreId || kept[v]) ? v : kUnknownId;
    }
    return out;
}

LabelGrid relabel_for_step(const LabelGrid& mask, const IncrementalScenario& scenario, int t) {
    const auto current = scenario.classes_at(t);
    return relabel_keep(mask, current, scenario.total_foreground_classes());
}

bool admit_for_step(const LabelGrid& mask, const IncrementalScenario& scenario, int t) {
    if (t < 1 || t > scenario.num_steps()) {
        throw ConfigError(fmt::format("step {} out of range [1, {}]", t, scenario.num_steps()));
    }
    bool has_current = false;
    bool has_future = false;
    for (ClassId v : mask.values()) {
        validate_label(v, scenario.total_foreground_classes());
        if (!scenario.is_foreground(v)) continue;
        const int s = scenario.step_of(v);
        has_current |= s == t;
        has_future |= s > t;
    }
    if (!has_current) return false;
    return scenario.mode() == SplitMode::overlapped || !has_future;
}

std::vector<std::size_t> filter_images_for_step(const Dataset& dataset, const IncrementalScenario& scenario,
                                                int t) {
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (admit_for_step(dataset.mask(i), scenario, t)) kept.push_back(i);
    }
    if (kept.empty()) {
        spdlog::warn("step {} of scenario {} ({}) admits no images", t, scenario.spec_string(),
                     to_string(scenario.mode()));
    }
    return kept;
}

}  // namespace coinseg

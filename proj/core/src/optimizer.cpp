#include "coinseg/optimizer.hpp"

#include <cmath>

#include "coinseg/errors.hpp"

namespace coinseg {

AdamW::AdamW(const AdamWConfig& config, std::size_t parameter_count)
    : config_(config), m_(parameter_count, 0.0f), v_(parameter_count, 0.0f) {}

void AdamW::step(nn::ParameterStore& params, std::span<const float> grad, std::span<const ParamGroup> groups) {
    if (params.size() != m_.size() || grad.size() != m_.size()) {
        throw TrainingError("optimizer state does not match the parameter count");
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    const auto b1 = static_cast<float>(config_.beta1);
    const auto b2 = static_cast<float>(config_.beta2);
    auto& values = params.values();
    for (const auto& group : groups) {
        if (group.lr == 0.0) continue;
        const auto decay = static_cast<float>(1.0 - group.lr * config_.weight_decay);
        const auto step_size = static_cast<float>(group.lr / c1);
        const auto inv_c2 = static_cast<float>(1.0 / c2);
        const auto eps = static_cast<float>(config_.eps);
        for (std::size_t s : group.slices) {
            const auto& slice = params.slice(s);
            for (std::size_t i = slice.offset; i < slice.offset + slice.size; ++i) {
                const float g = grad[i];
                m_[i] = b1 * m_[i] + (1.0f - b1) * g;
                v_[i] = b2 * v_[i] + (1.0f - b2) * g * g;
                values[i] = values[i] * decay - step_size * m_[i] / (std::sqrt(v_[i] * inv_c2) + eps);
            }
        }
    }
}

}  // namespace coinseg

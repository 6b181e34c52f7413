#pragma once

#include <span>
#include <string>
#include <vector>

#include "coinseg/nn.hpp"

namespace coinseg {

/// A set of parameter slices sharing one learning rate.
struct ParamGroup {
    std::string name;
    std::vector<std::size_t> slices;
    double lr = 0.0;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

/// Adam with decoupled weight decay. Groups with a zero learning rate are
/// skipped entirely, so their parameters stay bit-identical.
class AdamW {
  public:
    AdamW(const AdamWConfig& config, std::size_t parameter_count);

    void step(nn::ParameterStore& params, std::span<const float> grad, std::span<const ParamGroup> groups);
    [[nodiscard]] long steps_taken() const { return steps_; }

  private:
    AdamWConfig config_;
    std::vector<float> m_;
    std::vector<float> v_;
    long steps_ = 0;
};

}  // namespace coinseg

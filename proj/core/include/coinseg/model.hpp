#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "coinseg/nn.hpp"
#include "coinseg/tensor.hpp"

namespace coinseg {

struct ModelConfig {
    int input_size = 64;        // square input extent, multiple of 16
    int feature_channels = 64;  // C of the feature map M
    std::uint64_t seed = 1;
    bool init_new_from_unknown = false;  // copy c_u weights into new channels

    [[nodiscard]] nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

struct ForwardOutput {
    FeatureMap features;  // C x (S/4) x (S/4)
    LogitMap logits;      // (|seen|+1) x S x S
};

/// Intermediate activations of one forward pass, consumed by backward().
struct Activations {
    nn::Activation input, a1, a2, a3, a3b, a4, a4b, l4, l3, l2, sum, features, coarse_logits;
    nn::Matrix c1, c2, c3, c3b, c4, c4b, cl4, cl3, cl2, cfuse;
};

/// Strided convolutional encoder (four stride-2 stages) with a top-down
/// bilinear decoder producing M = g(x), followed by a 1x1 classifier h over
/// M whose output is upsampled to the input extent. Parameters are held in one
/// flat store; every classifier channel owns its own slice (weights, bias).
class SegModel {
  public:
    SegModel(const ModelConfig& config, std::span<const ClassId> initial_classes);

    [[nodiscard]] const ModelConfig& config() const { return config_; }
    [[nodiscard]] int feature_extent() const { return config_.input_size / 4; }
    /// Channel index -> class id; index 0 is c_u.
    [[nodiscard]] const std::vector<ClassId>& channel_ids() const { return channel_ids_; }
    [[nodiscard]] int num_channels() const { return static_cast<int>(channel_ids_.size()); }

    [[nodiscard]] ForwardOutput forward(const Image& image) const;
    [[nodiscard]] ForwardOutput forward(const Image& image, Activations& acts) const;

    /// Accumulates parameter gradients for dL/dlogits and an extra dL/dM
    /// (either may be null) into `grad`, which must have parameter_count() entries.
    void backward(const Activations& acts, const Tensor* logits_grad, const Tensor* features_grad,
                  std::span<float> grad) const;

    /// Appends one output channel per new class; existing weights are untouched.
    void expand_classifier(std::span<const ClassId> new_classes, std::uint64_t seed);

    [[nodiscard]] std::size_t parameter_count() const { return store_.size(); }
    [[nodiscard]] nn::ParameterStore& parameters() { return store_; }
    [[nodiscard]] const nn::ParameterStore& parameters() const { return store_; }
    /// Slices of the feature extractor g.
    [[nodiscard]] std::vector<std::size_t> feature_extractor_slices() const;
    /// Slice holding classifier weights and bias of output channel `channel`.
    [[nodiscard]] std::size_t classifier_slice(int channel) const { return classifier_slices_.at(channel); }

    void save(const std::filesystem::path& dir) const;
    static SegModel load(const std::filesystem::path& dir);

    bool operator==(const SegModel& other) const {
        return config_ == other.config_ && channel_ids_ == other.channel_ids_ && store_ == other.store_;
    }

  private:
    SegModel() = default;
    void build_backbone();
    void add_channel(ClassId id, Rng& rng);

    ModelConfig config_;
    nn::ParameterStore store_;
    nn::Conv2d e1_, e2_, e3_, e3b_, e4_, e4b_, lat4_, lat3_, lat2_, fuse_;
    std::size_t backbone_slices_ = 0;
    std::vector<ClassId> channel_ids_;
    std::vector<std::size_t> classifier_slices_;
};

/// Immutable copy of a model, used as the previous-step teacher f_{t-1}.
/// It exposes inference only, so no optimizer can reach its parameters.
class FrozenModel {
  public:
    [[nodiscard]] ForwardOutput forward(const Image& image) const { return model_->forward(image); }
    [[nodiscard]] const std::vector<ClassId>& channel_ids() const { return model_->channel_ids(); }
    [[nodiscard]] const SegModel& model() const { return *model_; }

    bool operator==(const FrozenModel& other) const { return *model_ == *other.model_; }

  private:
    friend FrozenModel snapshot(const SegModel& model);
    explicit FrozenModel(std::shared_ptr<const SegModel> m) : model_(std::move(m)) {}
    std::shared_ptr<const SegModel> model_;
};

FrozenModel snapshot(const SegModel& model);
inline FrozenModel snapshot(const FrozenModel& frozen) { return frozen; }

/// Per-pixel argmax labels (lowest channel index wins ties).
LabelGrid predict_labels(const LogitMap& logits);

}  // namespace coinseg

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/StdVector>

#include "coinseg/rng.hpp"

namespace coinseg::nn {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Float buffer with Eigen's maximal alignment. Vectorized kernels choose
/// their peeling by address, so a fixed alignment keeps results bit-stable.
using FloatBuffer = std::vector<float, Eigen::aligned_allocator<float>>;

/// Float activation tensor, channel-major.
struct Activation {
    int channels = 0;
    int height = 0;
    int width = 0;
    FloatBuffer data;

    Activation() = default;
    Activation(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, 0.0f) {}
    [[nodiscard]] int plane() const { return height * width; }
};

/// Flat float storage with named slices. Slices are append-only, so offsets
/// of existing parameters never move when the classifier grows.
class ParameterStore {
  public:
    struct Slice {
        std::string name;
        std::size_t offset = 0;
        std::size_t size = 0;
        bool operator==(const Slice&) const = default;
    };

    std::size_t add(std::string name, std::size_t size);

    [[nodiscard]] std::span<float> view(std::size_t slice) {
        const auto& s = slices_[slice];
        return {values_.data() + s.offset, s.size};
    }
    [[nodiscard]] std::span<const float> view(std::size_t slice) const {
        const auto& s = slices_[slice];
        return {values_.data() + s.offset, s.size};
    }
    [[nodiscard]] const Slice& slice(std::size_t i) const { return slices_[i]; }
    [[nodiscard]] std::size_t slice_count() const { return slices_.size(); }
    [[nodiscard]] std::size_t size() const { return values_.size(); }
    [[nodiscard]] FloatBuffer& values() { return values_; }
    [[nodiscard]] const FloatBuffer& values() const { return values_; }

    bool operator==(const ParameterStore&) const = default;

  private:
    std::vector<Slice> slices_;
    FloatBuffer values_;
};

struct ConvSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    int stride = 1;
    int padding = 1;
};

/// 2-D convolution with bias, lowered to a GEMM over an im2col buffer.
class Conv2d {
  public:
    Conv2d() = default;
    Conv2d(ParameterStore& store, const std::string& name, const ConvSpec& spec, Rng& rng, double init_std);

    [[nodiscard]] const ConvSpec& spec() const { return spec_; }
    [[nodiscard]] int output_extent(int input) const { return (input + 2 * spec_.padding - spec_.kernel) / spec_.stride + 1; }

    /// `cols` receives the lowered input, needed again by backward().
    void forward(const ParameterStore& store, const Activation& input, Activation& output, Matrix& cols) const;
    /// Accumulates weight/bias gradients into `grad` (same layout as the
    /// store); writes the input gradient when `input_grad` is non-null.
    void backward(const ParameterStore& store, const Matrix& cols, const Activation& output_grad, int in_height,
                  int in_width, Activation* input_grad, std::span<float> grad) const;

  private:
    ConvSpec spec_;
    std::size_t weight_ = 0;
    std::size_t bias_ = 0;
};

void relu_inplace(Activation& a);
/// Zeroes gradient entries where the ReLU output was not positive.
void relu_backward(const Activation& output, Activation& grad);

/// Bilinear resize with half-pixel centres (align_corners = false).
void resize_bilinear(const Activation& input, int out_height, int out_width, Activation& output);
void resize_bilinear_backward(const Activation& output_grad, int in_height, int in_width, Activation& input_grad);

}  // namespace coinseg::nn

#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace coinseg {

using ClassId = std::uint8_t;

/// Dense row-major 2-D grid.
template <typename T>
class Grid {
  public:
    Grid() = default;
    Grid(int height, int width, T fill = T{})
        : height_(height), width_(width), data_(static_cast<std::size_t>(height) * width, fill) {}

    [[nodiscard]] int height() const { return height_; }
    [[nodiscard]] int width() const { return width_; }
    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] bool empty() const { return data_.empty(); }

    T& operator()(int y, int x) { return data_[index(y, x)]; }
    const T& operator()(int y, int x) const { return data_[index(y, x)]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    [[nodiscard]] std::span<T> values() { return data_; }
    [[nodiscard]] std::span<const T> values() const { return data_; }
    [[nodiscard]] std::vector<T>& storage() { return data_; }
    [[nodiscard]] const std::vector<T>& storage() const { return data_; }

    [[nodiscard]] bool same_extent(int height, int width) const {
        return height_ == height && width_ == width;
    }
    template <typename U>
    [[nodiscard]] bool same_extent(const Grid<U>& other) const {
        return height_ == other.height() && width_ == other.width();
    }

    bool operator==(const Grid&) const = default;

  private:
    [[nodiscard]] std::size_t index(int y, int x) const {
        assert(y >= 0 && y < height_ && x >= 0 && x < width_);
        return static_cast<std::size_t>(y) * width_ + x;
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<T> data_;
};

using LabelGrid = Grid<ClassId>;
using RealGrid = Grid<double>;

/// Channel-major C x H x W tensor of doubles.
class Tensor {
  public:
    Tensor() = default;
    Tensor(int channels, int height, int width, double fill = 0.0)
        : channels_(channels),
          height_(height),
          width_(width),
          data_(static_cast<std::size_t>(channels) * height * width, fill) {}

    [[nodiscard]] int channels() const { return channels_; }
    [[nodiscard]] int height() const { return height_; }
    [[nodiscard]] int width() const { return width_; }
    [[nodiscard]] int plane() const { return height_ * width_; }
    [[nodiscard]] std::size_t size() const { return data_.size(); }

    double& operator()(int c, int y, int x) { return data_[index(c, y, x)]; }
    double operator()(int c, int y, int x) const { return data_[index(c, y, x)]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    [[nodiscard]] std::span<double> channel(int c) {
        return {data_.data() + static_cast<std::size_t>(c) * plane(), static_cast<std::size_t>(plane())};
    }
    [[nodiscard]] std::span<const double> channel(int c) const {
        return {data_.data() + static_cast<std::size_t>(c) * plane(), static_cast<std::size_t>(plane())};
    }

    [[nodiscard]] std::span<double> values() { return data_; }
    [[nodiscard]] std::span<const double> values() const { return data_; }

    [[nodiscard]] bool same_shape(const Tensor& o) const {
        return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_;
    }

    bool operator==(const Tensor&) const = default;

  private:
    [[nodiscard]] std::size_t index(int c, int y, int x) const {
        assert(c >= 0 && c < channels_ && y >= 0 && y < height_ && x >= 0 && x < width_);
        return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
    }

    int channels_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<double> data_;
};

/// RGB image in [0,1], stored planar (3 x H x W).
using Image = Tensor;

/// Dense features M = g(x): C x h x w.
using FeatureMap = Tensor;

/// Logits z = f(x) with the class id carried by each channel; channel 0 is c_u.
struct LogitMap {
    Tensor values;
    std::vector<ClassId> channel_ids;

    [[nodiscard]] int channel_of(ClassId id) const {
        for (std::size_t c = 0; c < channel_ids.size(); ++c) {
            if (channel_ids[c] == id) return static_cast<int>(c);
        }
        return -1;
    }
    bool operator==(const LogitMap&) const = default;
};

}  // namespace coinseg

#include "coinseg/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace coinseg::nn {
namespace {

using ConstMap = Eigen::Map<const Matrix>;
using MutMap = Eigen::Map<Matrix>;

void im2col(const Activation& in, const ConvSpec& s, int oh, int ow, Matrix& cols) {
    const int k = s.kernel;
    cols.resize(static_cast<Eigen::Index>(in.channels) * k * k, static_cast<Eigen::Index>(oh) * ow);
    for (int c = 0; c < in.channels; ++c) {
        const float* plane = in.data.data() + static_cast<std::size_t>(c) * in.plane();
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* row = cols.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * oh * ow;
                for (int y = 0; y < oh; ++y) {
                    const int iy = y * s.stride - s.padding + ky;
                    for (int x = 0; x < ow; ++x) {
                        const int ix = x * s.stride - s.padding + kx;
                        row[y * ow + x] =
                            (iy >= 0 && iy < in.height && ix >= 0 && ix < in.width) ? plane[iy * in.width + ix] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im(const Matrix& cols, const ConvSpec& s, int oh, int ow, Activation& out) {
    const int k = s.kernel;
    std::fill(out.data.begin(), out.data.end(), 0.0f);
    for (int c = 0; c < out.channels; ++c) {
        float* plane = out.data.data() + static_cast<std::size_t>(c) * out.plane();
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* row = cols.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * oh * ow;
                for (int y = 0; y < oh; ++y) {
                    const int iy = y * s.stride - s.padding + ky;
                    if (iy < 0 || iy >= out.height) continue;
                    for (int x = 0; x < ow; ++x) {
                        const int ix = x * s.stride - s.padding + kx;
                        if (ix >= 0 && ix < out.width) plane[iy * out.width + ix] += row[y * ow + x];
                    }
                }
            }
        }
    }
}

struct AxisWeights {
    std::vector<int> lo, hi;
    std::vector<float> frac;
};

AxisWeights axis_weights(int in, int out) {
    AxisWeights a;
    a.lo.resize(out);
    a.hi.resize(out);
    a.frac.resize(out);
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        const double src = std::max(0.0, (o + 0.5) * scale - 0.5);
        const int i0 = std::min(static_cast<int>(src), in - 1);
        a.lo[o] = i0;
        a.hi[o] = std::min(i0 + 1, in - 1);
        a.frac[o] = static_cast<float>(src - i0);
    }
    return a;
}

}  // namespace

std::size_t ParameterStore::add(std::string name, std::size_t size) {
    slices_.push_back({std::move(name), values_.size(), size});
    values_.resize(values_.size() + size, 0.0f);
    return slices_.size() - 1;
}

Conv2d::Conv2d(ParameterStore& store, const std::string& name, const ConvSpec& spec, Rng& rng, double init_std)
    : spec_(spec) {
    const std::size_t fan = static_cast<std::size_t>(spec.in_channels) * spec.kernel * spec.kernel;
    weight_ = store.add(name + ".weight", fan * spec.out_channels);
    bias_ = store.add(name + ".bias", static_cast<std::size_t>(spec.out_channels));
    std::normal_distribution<double> normal(0.0, init_std);
    for (float& w : store.view(weight_)) w = static_cast<float>(normal(rng));
}

void Conv2d::forward(const ParameterStore& store, const Activation& input, Activation& output, Matrix& cols) const {
    const int oh = output_extent(input.height);
    const int ow = output_extent(input.width);
    im2col(input, spec_, oh, ow, cols);
    output = Activation(spec_.out_channels, oh, ow);
    const ConstMap w(store.view(weight_).data(), spec_.out_channels, cols.rows());
    const Eigen::Map<const Eigen::VectorXf> b(store.view(bias_).data(), spec_.out_channels);
    MutMap out(output.data.data(), spec_.out_channels, cols.cols());
    out.noalias() = w * cols;
    out.colwise() += b;
}

void Conv2d::backward(const ParameterStore& store, const Matrix& cols, const Activation& output_grad, int in_height,
                      int in_width, Activation* input_grad, std::span<float> grad) const {
    const auto& ws = store.slice(weight_);
    const auto& bs = store.slice(bias_);
    const ConstMap dout(output_grad.data.data(), spec_.out_channels, cols.cols());
    MutMap dw(grad.data() + ws.offset, spec_.out_channels, cols.rows());
    Eigen::Map<Eigen::VectorXf> db(grad.data() + bs.offset, spec_.out_channels);
    dw.noalias() += dout * cols.transpose();
    db += dout.rowwise().sum();
    if (input_grad) {
        const ConstMap w(store.view(weight_).data(), spec_.out_channels, cols.rows());
        Matrix dcols = w.transpose() * dout;
        *input_grad = Activation(spec_.in_channels, in_height, in_width);
        col2im(dcols, spec_, output_grad.height, output_grad.width, *input_grad);
    }
}

void relu_inplace(Activation& a) {
    for (float& v : a.data) v = std::max(v, 0.0f);
}

void relu_backward(const Activation& output, Activation& grad) {
    for (std::size_t i = 0; i < grad.data.size(); ++i) {
        if (output.data[i] <= 0.0f) grad.data[i] = 0.0f;
    }
}

void resize_bilinear(const Activation& input, int out_height, int out_width, Activation& output) {
    const auto ry = axis_weights(input.height, out_height);
    const auto rx = axis_weights(input.width, out_width);
    output = Activation(input.channels, out_height, out_width);
    for (int c = 0; c < input.channels; ++c) {
        const float* in = input.data.data() + static_cast<std::size_t>(c) * input.plane();
        float* out = output.data.data() + static_cast<std::size_t>(c) * output.plane();
        for (int y = 0; y < out_height; ++y) {
            const float fy = ry.frac[y];
            const float* r0 = in + ry.lo[y] * input.width;
            const float* r1 = in + ry.hi[y] * input.width;
            for (int x = 0; x < out_width; ++x) {
                const float fx = rx.frac[x];
                const float top = (1 - fx) * r0[rx.lo[x]] + fx * r0[rx.hi[x]];
                const float bottom = (1 - fx) * r1[rx.lo[x]] + fx * r1[rx.hi[x]];
                out[y * out_width + x] = (1 - fy) * top + fy * bottom;
            }
        }
    }
}

void resize_bilinear_backward(const Activation& output_grad, int in_height, int in_width, Activation& input_grad) {
    const auto ry = axis_weights(in_height, output_grad.height);
    const auto rx = axis_weights(in_width, output_grad.width);
    input_grad = Activation(output_grad.channels, in_height, in_width);
    for (int c = 0; c < output_grad.channels; ++c) {
        const float* g = output_grad.data.data() + static_cast<std::size_t>(c) * output_grad.plane();
        float* in = input_grad.data.data() + static_cast<std::size_t>(c) * input_grad.plane();
        for (int y = 0; y < output_grad.height; ++y) {
            const float fy = ry.frac[y];
            float* r0 = in + ry.lo[y] * in_width;
            float* r1 = in + ry.hi[y] * in_width;
            for (int x = 0; x < output_grad.width; ++x) {
                const float fx = rx.frac[x];
                const float v = g[y * output_grad.width + x];
                r0[rx.lo[x]] += (1 - fy) * (1 - fx) * v;
                r0[rx.hi[x]] += (1 - fy) * fx * v;
                r1[rx.lo[x]] += fy * (1 - fx) * v;
                r1[rx.hi[x]] += fy * fx * v;
            }
        }
    }
}

}  // namespace coinseg::nn

#include <random>

#include <benchmark/benchmark.h>

#include "coinseg/data.hpp"
#include "coinseg/losses.hpp"
#include "coinseg/model.hpp"
#include "coinseg/proposals.hpp"
#include "coinseg/scenario.hpp"

namespace {

using namespace coinseg;

Tensor random_tensor(int c, int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor t(c, h, w);
    for (double& v : t.values()) v = u(rng);
    return t;
}

const Dataset& shapes() {
    static const Dataset d = [] {
        SyntheticSpec spec;
        spec.samples_per_class = 2;
        return generate_synthetic_dataset(spec);
    }();
    return d;
}

std::vector<ClassId> classes(int n) {
    std::vector<ClassId> v;
    for (int i = 1; i <= n; ++i) v.push_back(static_cast<ClassId>(i));
    return v;
}

void BM_Forward(benchmark::State& state) {
    const SegModel model(ModelConfig{}, classes(6));
    const Image img = shapes().sample(0).image;
    for (auto _ : state) benchmark::DoNotOptimize(model.forward(img));
}
BENCHMARK(BM_Forward)->Unit(benchmark::kMillisecond);

void BM_ForwardBackward(benchmark::State& state) {
    const SegModel model(ModelConfig{}, classes(6));
    const Image img = shapes().sample(0).image;
    std::vector<float> grad(model.parameter_count());
    for (auto _ : state) {
        Activations acts;
        const auto out = model.forward(img, acts);
        const Tensor dz(out.logits.values.channels(), 64, 64, 1e-3);
        model.backward(acts, &dz, nullptr, grad);
        benchmark::DoNotOptimize(grad.data());
    }
}
BENCHMARK(BM_ForwardBackward)->Unit(benchmark::kMillisecond);

void BM_Proposals(benchmark::State& state) {
    const Image img = shapes().sample(1).image;
    const int n = static_cast<int>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(generate_proposals(img, n));
}
BENCHMARK(BM_Proposals)->Arg(25)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_IntraContrastive(benchmark::State& state) {
    const auto proposals = generate_proposals(shapes().sample(2).image, static_cast<int>(state.range(0)));
    const Tensor mt = random_tensor(64, 16, 16, 1);
    const Tensor mp = random_tensor(64, 16, 16, 2);
    for (auto _ : state) benchmark::DoNotOptimize(intra_class_loss(proposals, mt, mp, {}, true));
}
BENCHMARK(BM_IntraContrastive)->Arg(25)->Arg(100)->Unit(benchmark::kMicrosecond);

void BM_Bce(benchmark::State& state) {
    const auto channels = static_cast<int>(state.range(0));
    std::vector<ClassId> ids{kUnknownId};
    for (int i = 1; i < channels; ++i) ids.push_back(static_cast<ClassId>(i));
    const LogitMap z{random_tensor(channels, 64, 64, 3), ids};
    LabelGrid y(64, 64, 1);
    for (auto _ : state) benchmark::DoNotOptimize(bce_seg(z, y, true));
}
BENCHMARK(BM_Bce)->Arg(3)->Arg(21)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();

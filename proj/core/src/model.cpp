#include "coinseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <fmt/format.h>

#include "coinseg/errors.hpp"
#include "coinseg/scenario.hpp"

namespace coinseg {
namespace {

using nn::Activation;
using nn::ConvSpec;

constexpr char kWeightsMagic[4] = {'C', 'S', 'G', 'W'};
constexpr std::uint32_t kWeightsVersion = 1;

double he_std(int fan_in) { return std::sqrt(2.0 / fan_in); }

Activation to_activation(const Tensor& t) {
    Activation a(t.channels(), t.height(), t.width());
    for (std::size_t i = 0; i < t.size(); ++i) a.data[i] = static_cast<float>(t[i]);
    return a;
}

Tensor to_tensor(const Activation& a) {
    Tensor t(a.channels, a.height, a.width);
    for (std::size_t i = 0; i < a.data.size(); ++i) t[i] = a.data[i];
    return t;
}

void add_into(Activation& dst, const Activation& src) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace

nlohmann::json ModelConfig::to_json() const {
    return {{"input_size", input_size},
            {"feature_channels", feature_channels},
            {"seed", seed},
            {"init_new_from_unknown", init_new_from_unknown}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.input_size = j.at("input_size").get<int>();
    c.feature_channels = j.at("feature_channels").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.init_new_from_unknown = j.value("init_new_from_unknown", false);
    return c;
}

SegModel::SegModel(const ModelConfig& config, std::span<const ClassId> initial_classes) : config_(config) {
    if (config_.input_size < 16 || config_.input_size % 16 != 0) {
        throw ConfigError(fmt::format("model input size must be a positive multiple of 16, got {}", config_.input_size));
    }
    if (config_.feature_channels < 1) throw ConfigError("feature_channels must be >= 1");
    build_backbone();
    Rng rng(derive_seed(config_.seed, "classifier", kUnknownId));
    add_channel(kUnknownId, rng);
    expand_classifier(initial_classes, config_.seed);
}

void SegModel::build_backbone() {
    Rng rng(derive_seed(config_.seed, "backbone"));
    const int c = config_.feature_channels;
    auto conv = [&](const char* name, int in, int out, int k, int stride) {
        const int pad = k / 2;
        return nn::Conv2d(store_, name, ConvSpec{in, out, k, stride, pad}, rng, he_std(in * k * k));
    };
    e1_ = conv("enc1", 3, 24, 3, 2);
    e2_ = conv("enc2", 24, 48, 3, 2);
    e3_ = conv("enc3", 48, 96, 3, 2);
    e3b_ = conv("enc3b", 96, 96, 3, 1);
    e4_ = conv("enc4", 96, 128, 3, 2);
    e4b_ = conv("enc4b", 128, 128, 3, 1);
    lat4_ = nn::Conv2d(store_, "lat4", ConvSpec{128, c, 1, 1, 0}, rng, std::sqrt(1.0 / 128));
    lat3_ = nn::Conv2d(store_, "lat3", ConvSpec{96, c, 1, 1, 0}, rng, std::sqrt(1.0 / 96));
    lat2_ = nn::Conv2d(store_, "lat2", ConvSpec{48, c, 1, 1, 0}, rng, std::sqrt(1.0 / 48));
    fuse_ = conv("fuse", c, c, 3, 1);
    backbone_slices_ = store_.slice_count();
}

void SegModel::add_channel(ClassId id, Rng& rng) {
    const int c = config_.feature_channels;
    const std::size_t slice = store_.add(fmt::format("classifier.{}", id), static_cast<std::size_t>(c) + 1);
    auto w = store_.view(slice);
    std::normal_distribution<double> normal(0.0, 0.01);
    for (int i = 0; i < c; ++i) w[i] = static_cast<float>(normal(rng));
    w[c] = 0.0f;
    channel_ids_.push_back(id);
    classifier_slices_.push_back(slice);
}

void SegModel::expand_classifier(std::span<const ClassId> new_classes, std::uint64_t seed) {
    for (std::size_t i = 0; i < new_classes.size(); ++i) {
        const ClassId id = new_classes[i];
        if (id == kUnknownId || id == kIgnoreId) {
            throw ConfigError(fmt::format("class id {} is reserved", id));
        }
        if (std::find(channel_ids_.begin(), channel_ids_.end(), id) != channel_ids_.end() ||
            std::find(new_classes.begin(), new_classes.begin() + static_cast<std::ptrdiff_t>(i), id) !=
                new_classes.begin() + static_cast<std::ptrdiff_t>(i)) {
            throw ConfigError(fmt::format("classifier already has a channel for class {}", id));
        }
    }
    for (ClassId id : new_classes) {
        Rng rng(derive_seed(seed, "classifier", id));
        add_channel(id, rng);
        if (config_.init_new_from_unknown) {
            const auto src = store_.view(classifier_slices_.front());
            auto dst = store_.view(classifier_slices_.back());
            std::copy(src.begin(), src.end(), dst.begin());
            dst.back() = src.back() - static_cast<float>(std::log(new_classes.size() + 1.0));
        }
    }
}

std::vector<std::size_t> SegModel::feature_extractor_slices() const {
    std::vector<std::size_t> out(backbone_slices_);
    for (std::size_t i = 0; i < backbone_slices_; ++i) out[i] = i;
    return out;
}

ForwardOutput SegModel::forward(const Image& image) const {
    Activations acts;
    return forward(image, acts);
}

ForwardOutput SegModel::forward(const Image& image, Activations& a) const {
    const int s = config_.input_size;
    if (image.channels() != 3 || image.height() != s || image.width() != s) {
        throw DataError(fmt::format("model expects a 3x{}x{} image, got {}x{}x{}", s, s, image.channels(),
                                    image.height(), image.width()));
    }
    const int fs = feature_extent();
    a.input = to_activation(image);
    e1_.forward(store_, a.input, a.a1, a.c1);
    nn::relu_inplace(a.a1);
    e2_.forward(store_, a.a1, a.a2, a.c2);
    nn::relu_inplace(a.a2);
    e3_.forward(store_, a.a2, a.a3, a.c3);
    nn::relu_inplace(a.a3);
    e3b_.forward(store_, a.a3, a.a3b, a.c3b);
    nn::relu_inplace(a.a3b);
    e4_.forward(store_, a.a3b, a.a4, a.c4);
    nn::relu_inplace(a.a4);
    e4b_.forward(store_, a.a4, a.a4b, a.c4b);
    nn::relu_inplace(a.a4b);

    lat4_.forward(store_, a.a4b, a.l4, a.cl4);
    lat3_.forward(store_, a.a3b, a.l3, a.cl3);
    lat2_.forward(store_, a.a2, a.l2, a.cl2);
    Activation up;
    a.sum = a.l2;
    nn::resize_bilinear(a.l4, fs, fs, up);
    add_into(a.sum, up);
    nn::resize_bilinear(a.l3, fs, fs, up);
    add_into(a.sum, up);
    fuse_.forward(store_, a.sum, a.features, a.cfuse);
    nn::relu_inplace(a.features);

    const int k = num_channels();
    const int c = a.features.channels;
    nn::Matrix w(k, c);
    Eigen::VectorXf b(k);
    for (int ch = 0; ch < k; ++ch) {
        const auto v = store_.view(classifier_slices_[ch]);
        for (int i = 0; i < c; ++i) w(ch, i) = v[i];
        b(ch) = v[c];
    }
    a.coarse_logits = Activation(k, fs, fs);
    Eigen::Map<const nn::Matrix> m(a.features.data.data(), c, a.features.plane());
    Eigen::Map<nn::Matrix> z(a.coarse_logits.data.data(), k, a.features.plane());
    z.noalias() = w * m;
    z.colwise() += b;
    Activation logits;
    nn::resize_bilinear(a.coarse_logits, s, s, logits);
    return {to_tensor(a.features), LogitMap{to_tensor(logits), channel_ids_}};
}

void SegModel::backward(const Activations& a, const Tensor* logits_grad, const Tensor* features_grad,
                        std::span<float> grad) const {
    if (grad.size() != store_.size()) throw TrainingError("gradient buffer does not match parameter count");
    const int fs = feature_extent();
    const int k = num_channels();
    const int c = a.features.channels;
    const int plane = a.features.plane();

    Activation dm(c, fs, fs);
    if (features_grad) {
        if (features_grad->channels() != c || features_grad->height() != fs || features_grad->width() != fs) {
            throw TrainingError("feature gradient shape mismatch");
        }
        dm = to_activation(*features_grad);
    }
    if (logits_grad) {
        if (logits_grad->channels() != k || logits_grad->height() != config_.input_size ||
            logits_grad->width() != config_.input_size) {
            throw TrainingError("logit gradient shape mismatch");
        }
        Activation dcoarse;
        nn::resize_bilinear_backward(to_activation(*logits_grad), fs, fs, dcoarse);
        Eigen::Map<const nn::Matrix> dz(dcoarse.data.data(), k, plane);
        Eigen::Map<const nn::Matrix> m(a.features.data.data(), c, plane);
        nn::Matrix w(k, c);
        for (int ch = 0; ch < k; ++ch) {
            const auto v = store_.view(classifier_slices_[ch]);
            for (int i = 0; i < c; ++i) w(ch, i) = v[i];
            const std::size_t off = store_.slice(classifier_slices_[ch]).offset;
            Eigen::Map<Eigen::RowVectorXf> gw(grad.data() + off, c);
            gw.noalias() += dz.row(ch) * m.transpose();
            grad[off + c] += dz.row(ch).sum();
        }
        Eigen::Map<nn::Matrix> dmm(dm.data.data(), c, plane);
        dmm.noalias() += w.transpose() * dz;
    }

    nn::relu_backward(a.features, dm);
    Activation dsum;
    fuse_.backward(store_, a.cfuse, dm, fs, fs, &dsum, grad);

    Activation dl4, dl3, da4b, da3b, da2, tmp;
    nn::resize_bilinear_backward(dsum, a.l4.height, a.l4.width, dl4);
    nn::resize_bilinear_backward(dsum, a.l3.height, a.l3.width, dl3);
    lat4_.backward(store_, a.cl4, dl4, a.a4b.height, a.a4b.width, &da4b, grad);
    lat3_.backward(store_, a.cl3, dl3, a.a3b.height, a.a3b.width, &da3b, grad);
    lat2_.backward(store_, a.cl2, dsum, a.a2.height, a.a2.width, &da2, grad);

    Activation da4;
    nn::relu_backward(a.a4b, da4b);
    e4b_.backward(store_, a.c4b, da4b, a.a4.height, a.a4.width, &da4, grad);
    nn::relu_backward(a.a4, da4);
    e4_.backward(store_, a.c4, da4, a.a3b.height, a.a3b.width, &tmp, grad);
    add_into(da3b, tmp);
    Activation da3;
    nn::relu_backward(a.a3b, da3b);
    e3b_.backward(store_, a.c3b, da3b, a.a3.height, a.a3.width, &da3, grad);
    nn::relu_backward(a.a3, da3);
    e3_.backward(store_, a.c3, da3, a.a2.height, a.a2.width, &tmp, grad);
    add_into(da2, tmp);
    Activation da1;
    nn::relu_backward(a.a2, da2);
    e2_.backward(store_, a.c2, da2, a.a1.height, a.a1.width, &da1, grad);
    nn::relu_backward(a.a1, da1);
    e1_.backward(store_, a.c1, da1, a.input.height, a.input.width, nullptr, grad);
}

void SegModel::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir / "weights.bin", std::ios::binary);
        if (!os) throw DataError(fmt::format("cannot write weights to '{}'", dir.string()));
        os.write(kWeightsMagic, 4);
        const std::uint32_t version = kWeightsVersion;
        const auto count = static_cast<std::uint32_t>(store_.slice_count());
        os.write(reinterpret_cast<const char*>(&version), sizeof version);
        os.write(reinterpret_cast<const char*>(&count), sizeof count);
        for (std::size_t i = 0; i < store_.slice_count(); ++i) {
            const auto& s = store_.slice(i);
            const auto len = static_cast<std::uint16_t>(s.name.size());
            const auto size = static_cast<std::uint64_t>(s.size);
            os.write(reinterpret_cast<const char*>(&len), sizeof len);
            os.write(s.name.data(), len);
            os.write(reinterpret_cast<const char*>(&size), sizeof size);
            os.write(reinterpret_cast<const char*>(store_.view(i).data()), static_cast<std::streamsize>(s.size * sizeof(float)));
        }
        if (!os) throw DataError(fmt::format("cannot write weights to '{}'", dir.string()));
    }
    std::vector<int> ids(channel_ids_.begin(), channel_ids_.end());
    const nlohmann::json manifest = {{"model", config_.to_json()},
                                     {"channel_ids", ids},
                                     {"parameter_count", store_.size()}};
    std::ofstream(dir / "channels.json") << manifest.dump(2) << '\n';
}

SegModel SegModel::load(const std::filesystem::path& dir) {
    std::ifstream ms(dir / "channels.json");
    if (!ms) throw DataError(fmt::format("checkpoint '{}' has no channels.json", dir.string()));
    nlohmann::json manifest;
    try {
        ms >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("invalid channel manifest in '{}': {}", dir.string(), e.what()));
    }
    SegModel m;
    m.config_ = ModelConfig::from_json(manifest.at("model"));
    m.build_backbone();
    const auto ids = manifest.at("channel_ids").get<std::vector<int>>();
    if (ids.empty() || ids.front() != kUnknownId) throw DataError("channel manifest must start with c_u");
    Rng unused(0);
    for (int id : ids) m.add_channel(static_cast<ClassId>(id), unused);

    std::ifstream is(dir / "weights.bin", std::ios::binary);
    if (!is) throw DataError(fmt::format("checkpoint '{}' has no weights.bin", dir.string()));
    char magic[4];
    std::uint32_t version = 0;
    std::uint32_t count = 0;
    is.read(magic, 4);
    is.read(reinterpret_cast<char*>(&version), sizeof version);
    is.read(reinterpret_cast<char*>(&count), sizeof count);
    if (!is || std::memcmp(magic, kWeightsMagic, 4) != 0 || version != kWeightsVersion) {
        throw DataError(fmt::format("'{}' is not a weights file", (dir / "weights.bin").string()));
    }
    if (count != m.store_.slice_count()) throw DataError("weights file does not match the channel manifest");
    for (std::size_t i = 0; i < count; ++i) {
        std::uint16_t len = 0;
        is.read(reinterpret_cast<char*>(&len), sizeof len);
        std::string name(len, '\0');
        is.read(name.data(), len);
        std::uint64_t size = 0;
        is.read(reinterpret_cast<char*>(&size), sizeof size);
        const auto& s = m.store_.slice(i);
        if (!is || name != s.name || size != s.size) {
            throw DataError(fmt::format("weights file slice '{}' does not match architecture", name));
        }
        is.read(reinterpret_cast<char*>(m.store_.view(i).data()), static_cast<std::streamsize>(size * sizeof(float)));
        if (!is) throw DataError("truncated weights file");
    }
    return m;
}

FrozenModel snapshot(const SegModel& model) { return FrozenModel(std::make_shared<const SegModel>(model)); }

LabelGrid predict_labels(const LogitMap& logits) {
    const auto& z = logits.values;
    LabelGrid out(z.height(), z.width());
    const int plane = z.plane();
    for (int p = 0; p < plane; ++p) {
        int best = 0;
        double best_v = z[static_cast<std::size_t>(p)];
        for (int c = 1; c < z.channels(); ++c) {
            const double v = z[static_cast<std::size_t>(c) * plane + p];
            if (v > best_v) {
                best_v = v;
                best = c;
            }
        }
        out[static_cast<std::size_t>(p)] = logits.channel_ids[static_cast<std::size_t>(best)];
    }
    return out;
}

}  // namespace coinseg

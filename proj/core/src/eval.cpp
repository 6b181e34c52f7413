#include "coinseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <fmt/format.h>

#include "coinseg/data.hpp"
#include "coinseg/errors.hpp"
#include "coinseg/nn.hpp"
#include "coinseg/parallel.hpp"

namespace coinseg {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

nlohmann::json number_or_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

double number_from(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }

bool same_value(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

Image fit_to_model(const Image& image, int size) {
    if (image.height() == size && image.width() == size) return image;
    nn::Activation in(image.channels(), image.height(), image.width());
    for (std::size_t i = 0; i < image.size(); ++i) in.data[i] = static_cast<float>(image[i]);
    nn::Activation out;
    nn::resize_bilinear(in, size, size, out);
    Image result(out.channels, size, size);
    for (std::size_t i = 0; i < result.size(); ++i) result[i] = out.data[i];
    return result;
}

LabelGrid resize_nearest(const LabelGrid& labels, int height, int width) {
    if (labels.same_extent(height, width)) return labels;
    LabelGrid out(height, width);
    for (int y = 0; y < height; ++y) {
        const int sy = std::min(labels.height() - 1, static_cast<int>((y + 0.5) * labels.height() / height));
        for (int x = 0; x < width; ++x) {
            const int sx = std::min(labels.width() - 1, static_cast<int>((x + 0.5) * labels.width() / width));
            out(y, x) = labels(sy, sx);
        }
    }
    return out;
}

std::string format_number(double v) { return std::isnan(v) ? "nan" : fmt::format("{:.17g}", v); }

double parse_number(const std::string& s) { return s == "nan" ? kNaN : std::stod(s); }

}  // namespace

ConfusionMatrix::ConfusionMatrix(std::vector<ClassId> classes)
    : classes_(std::move(classes)), counts_(classes_.size() * classes_.size(), 0) {
    for (std::size_t i = 0; i < classes_.size(); ++i) {
        const ClassId id = classes_[i];
        if (id == kIgnoreId) throw ConfigError("the ignore label cannot be a confusion-matrix class");
        if (index_[id] >= 0) throw ConfigError(fmt::format("class {} listed twice in confusion matrix", id));
        index_[id] = static_cast<int>(i);
    }
}

std::uint64_t ConfusionMatrix::row_sum(int index) const {
    std::uint64_t s = 0;
    for (int j = 0; j < size(); ++j) s += count(index, j);
    return s;
}

std::uint64_t ConfusionMatrix::col_sum(int index) const {
    std::uint64_t s = 0;
    for (int i = 0; i < size(); ++i) s += count(i, index);
    return s;
}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
}

void ConfusionMatrix::accumulate(const LabelGrid& ground_truth, const LabelGrid& prediction) {
    if (!ground_truth.same_extent(prediction)) throw DataError("confusion matrix: mask extents differ");
    const std::size_t n = classes_.size();
    for (std::size_t p = 0; p < ground_truth.size(); ++p) {
        const ClassId g = ground_truth[p];
        if (g == kIgnoreId) continue;
        const int gi = index_[g];
        const int pi = index_[prediction[p]];
        if (gi < 0) throw DataError(fmt::format("ground-truth label {} is not an evaluated class", g));
        if (pi < 0) throw DataError(fmt::format("predicted label {} is not an evaluated class", prediction[p]));
        ++counts_[static_cast<std::size_t>(gi) * n + pi];
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw DataError("cannot merge confusion matrices over different classes");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

double iou(const ConfusionMatrix& cm, ClassId id) {
    const int i = cm.index_of(id);
    if (i < 0) throw DataError(fmt::format("class {} is not in the confusion matrix", id));
    const double diag = static_cast<double>(cm.count(i, i));
    const double denom = static_cast<double>(cm.row_sum(i) + cm.col_sum(i)) - diag;
    return denom == 0.0 ? kNaN : diag / denom;
}

double mean_defined(const ConfusionMatrix& cm, std::span<const ClassId> ids) {
    double sum = 0.0;
    int n = 0;
    for (ClassId id : ids) {
        const double v = iou(cm, id);
        if (std::isnan(v)) continue;
        sum += v;
        ++n;
    }
    return n == 0 ? kNaN : sum / n;
}

nlohmann::json MetricsRecord::to_json() const {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [id, v] : class_iou) per_class[std::to_string(id)] = number_or_null(v);
    return {{"step", step},
            {"background_convention", unknown_as_background ? "c_u scored as background class 0"
                                                            : "c_u excluded from group means"},
            {"unknown_as_background", unknown_as_background},
            {"class_iou", per_class},
            {"miou_base", number_or_null(base_miou)},
            {"miou_novel", number_or_null(novel_miou)},
            {"miou_all", number_or_null(all_miou)}};
}

MetricsRecord MetricsRecord::from_json(const nlohmann::json& j) {
    MetricsRecord r;
    r.step = j.at("step").get<int>();
    r.unknown_as_background = j.value("unknown_as_background", true);
    for (const auto& [key, v] : j.at("class_iou").items()) r.class_iou[std::stoi(key)] = number_from(v);
    r.base_miou = number_from(j.at("miou_base"));
    r.novel_miou = number_from(j.at("miou_novel"));
    r.all_miou = number_from(j.at("miou_all"));
    return r;
}

bool MetricsRecord::operator==(const MetricsRecord& o) const {
    if (step != o.step || unknown_as_background != o.unknown_as_background || class_iou.size() != o.class_iou.size()) {
        return false;
    }
    for (const auto& [id, v] : class_iou) {
        const auto it = o.class_iou.find(id);
        if (it == o.class_iou.end() || !same_value(v, it->second)) return false;
    }
    return same_value(base_miou, o.base_miou) && same_value(novel_miou, o.novel_miou) &&
           same_value(all_miou, o.all_miou);
}

MetricsRecord grouped_miou(const ConfusionMatrix& cm, const IncrementalScenario& scenario, int t,
                           const EvalOptions& options) {
    MetricsRecord r;
    r.step = t;
    r.unknown_as_background = options.unknown_as_background;

    std::vector<ClassId> base = scenario.classes_at(1);
    std::vector<ClassId> novel;
    for (int s = 2; s <= t; ++s) {
        const auto cs = scenario.classes_at(s);
        novel.insert(novel.end(), cs.begin(), cs.end());
    }
    std::vector<ClassId> all = scenario.seen_classes(t);
    if (options.unknown_as_background) {
        base.insert(base.begin(), kUnknownId);
        all.insert(all.begin(), kUnknownId);
    }
    for (ClassId id : cm.classes()) r.class_iou[id] = iou(cm, id);
    r.base_miou = mean_defined(cm, base);
    r.novel_miou = novel.empty() ? kNaN : mean_defined(cm, novel);
    r.all_miou = mean_defined(cm, all);
    return r;
}

ConfusionMatrix confusion_for_step(const SegModel& model, const Dataset& validation,
                                   const IncrementalScenario& scenario, int t, const EvalOptions& options) {
    const auto seen = scenario.seen_classes(t);
    std::vector<ClassId> classes{kUnknownId};
    classes.insert(classes.end(), seen.begin(), seen.end());
    for (ClassId id : model.channel_ids()) {
        if (std::find(classes.begin(), classes.end(), id) == classes.end()) {
            throw DataError(fmt::format("model predicts class {} which is not seen at step {}", id, t));
        }
    }

    std::vector<ConfusionMatrix> parts(validation.size(), ConfusionMatrix(classes));
    parallel_for(validation.size(), options.workers, [&](std::size_t i) {
        const SegSample sample = validation.sample(i);
        const LabelGrid gt = relabel_keep(sample.mask, seen, scenario.total_foreground_classes());
        const auto out = model.forward(fit_to_model(sample.image, model.config().input_size));
        const LabelGrid pred = resize_nearest(predict_labels(out.logits), gt.height(), gt.width());
        parts[i].accumulate(gt, pred);
    });
    ConfusionMatrix cm(classes);
    for (const auto& p : parts) cm.merge(p);
    return cm;
}

MetricsRecord evaluate(const SegModel& model, const Dataset& validation, const IncrementalScenario& scenario, int t,
                       const EvalOptions& options) {
    return grouped_miou(confusion_for_step(model, validation, scenario, t, options), scenario, t, options);
}

void emit_curves(std::span<const MetricsRecord> records, const std::filesystem::path& csv_path,
                 const std::filesystem::path& svg_path) {
    if (records.empty()) throw ConfigError("emit_curves needs at least one metrics record");
    {
        std::ofstream os(csv_path);
        if (!os) throw DataError(fmt::format("cannot write '{}'", csv_path.string()));
        os << "step,miou_all,miou_base,miou_novel\n";
        for (const auto& r : records) {
            os << r.step << ',' << format_number(r.all_miou) << ',' << format_number(r.base_miou) << ','
               << format_number(r.novel_miou) << '\n';
        }
    }

    constexpr double kW = 480, kH = 320, kLeft = 56, kRight = 16, kTop = 24, kBottom = 44;
    const int first = records.front().step;
    const int last = records.back().step;
    const double span_steps = std::max(1, last - first);
    auto px = [&](int step) { return kLeft + (step - first) / span_steps * (kW - kLeft - kRight); };
    auto py = [&](double v) { return kTop + (1.0 - v) * (kH - kTop - kBottom); };

    std::ofstream os(svg_path);
    if (!os) throw DataError(fmt::format("cannot write '{}'", svg_path.string()));
    os << fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">)", kW, kH,
                      kW, kH)
       << '\n';
    os << R"(<rect width="100%" height="100%" fill="white"/>)" << '\n';
    for (int i = 0; i <= 4; ++i) {
        const double v = i / 4.0;
        os << fmt::format(R"(<line x1="{:.1f}" y1="{:.1f}" x2="{:.1f}" y2="{:.1f}" stroke="#ddd"/>)", kLeft, py(v),
                          kW - kRight, py(v))
           << '\n';
        os << fmt::format(R"(<text x="{:.1f}" y="{:.1f}" font-size="11" text-anchor="end">{:.0f}</text>)",
                          kLeft - 6, py(v) + 4, v * 100)
           << '\n';
    }
    for (const auto& r : records) {
        os << fmt::format(R"(<text x="{:.1f}" y="{:.1f}" font-size="11" text-anchor="middle">{}</text>)", px(r.step),
                          kH - kBottom + 16, r.step)
           << '\n';
    }
    os << fmt::format(R"(<text x="{:.1f}" y="{:.1f}" font-size="12" text-anchor="middle">step</text>)",
                      (kLeft + kW - kRight) / 2, kH - 8)
       << '\n';
    os << R"(<text x="14" y="16" font-size="12">mIoU (all seen classes)</text>)" << '\n';
    std::string points;
    for (const auto& r : records) {
        if (std::isnan(r.all_miou)) continue;
        points += fmt::format("{:.1f},{:.1f} ", px(r.step), py(r.all_miou));
    }
    os << R"(<polyline fill="none" stroke="#1f77b4" stroke-width="2" points=")" << points << R"("/>)" << '\n';
    for (const auto& r : records) {
        if (std::isnan(r.all_miou)) continue;
        os << fmt::format(R"(<circle cx="{:.1f}" cy="{:.1f}" r="3" fill="#1f77b4"/>)", px(r.step), py(r.all_miou))
           << '\n';
    }
    os << "</svg>\n";
}

std::vector<CurvePoint> read_curves(const std::filesystem::path& csv_path) {
    std::ifstream is(csv_path);
    if (!is) throw DataError(fmt::format("cannot read '{}'", csv_path.string()));
    std::string line;
    std::getline(is, line);
    std::vector<CurvePoint> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string f[4];
        for (auto& s : f) {
            if (!std::getline(ss, s, ',')) throw DataError(fmt::format("malformed curve row '{}'", line));
        }
        out.push_back({std::stoi(f[0]), parse_number(f[1]), parse_number(f[2]), parse_number(f[3])});
    }
    return out;
}

}  // namespace coinseg

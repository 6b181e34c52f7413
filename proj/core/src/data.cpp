#include "coinseg/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "coinseg/errors.hpp"
#include "coinseg/image_io.hpp"
#include "coinseg/rng.hpp"
#include "coinseg/scenario.hpp"

namespace fs = std::filesystem;

namespace coinseg {
namespace {

std::vector<ClassId> present_classes(const LabelGrid& mask, int total) {
    std::array<bool, 256> seen{};
    for (ClassId v : mask.values()) seen[v] = true;
    std::vector<ClassId> out;
    for (int c = 1; c <= total; ++c) {
        if (seen[c]) out.push_back(static_cast<ClassId>(c));
    }
    return out;
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    h = std::fmod(h, 1.0) * 6.0;
    const int sector = static_cast<int>(h) % 6;
    const double f = h - std::floor(h);
    const double p = v * (1 - s);
    const double q = v * (1 - s * f);
    const double r = v * (1 - s * (1 - f));
    switch (sector) {
        case 0: return {v, r, p};
        case 1: return {q, v, p};
        case 2: return {p, v, r};
        case 3: return {p, q, v};
        case 4: return {r, p, v};
        default: return {v, p, q};
    }
}

// Inside test for shape family `family` in the instance frame (u, v) in [-1, 1]^2.
bool inside_shape(int family, double u, double v) {
    const double au = std::abs(u);
    const double av = std::abs(v);
    switch (family % 8) {
        case 0: return u * u + v * v <= 1.0;                                 // disc
        case 1: return au <= 0.85 && av <= 0.85;                             // square
        case 2: return v <= 0.9 && v >= -0.9 && au <= (v + 0.9) * 0.55;      // triangle
        case 3: {                                                             // ring
            const double r2 = u * u + v * v;
            return r2 <= 1.0 && r2 >= 0.3;
        }
        case 4: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);  // cross
        case 5: return au + av <= 1.0;                                        // diamond
        case 6: return au <= 1.0 && av <= 0.45;                               // bar
        default: {                                                            // four-point star
            return std::sqrt(au) + std::sqrt(av) <= 1.0;
        }
    }
}

double texture(int variant, int cls, int y, int x) {
    const double f = 0.35 + 0.12 * (cls % 5);
    switch (variant % 3) {
        case 0: return 0.08 * std::sin(f * (x + y));
        case 1: return ((x / 3 + y / 3) % 2 == 0) ? 0.07 : -0.07;
        default: return 0.08 * std::sin(f * x) * std::sin(f * y);
    }
}

struct Instance {
    ClassId cls;
    double cy, cx, radius;
    std::array<double, 3> color;
};

Instance draw_instance(Rng& rng, ClassId cls, int num_classes, int size) {
    Instance inst{};
    inst.cls = cls;
    inst.radius = uniform(rng, 0.14, 0.26) * size;
    inst.cy = uniform(rng, inst.radius, size - inst.radius);
    inst.cx = uniform(rng, inst.radius, size - inst.radius);
    const double hue = static_cast<double>(cls - 1) / num_classes + uniform(rng, -0.015, 0.015);
    inst.color = hsv_to_rgb(hue + 1.0, uniform(rng, 0.75, 0.95), uniform(rng, 0.75, 0.95));
    return inst;
}

void render_instance(const Instance& inst, Image& image, LabelGrid& mask) {
    const int size = mask.height();
    const int k = inst.cls - 1;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double u = (x + 0.5 - inst.cx) / inst.radius;
            const double v = (y + 0.5 - inst.cy) / inst.radius;
            if (!inside_shape(k, u, v)) continue;
            const double t = texture(k + k / 8, k, y, x);
            for (int c = 0; c < 3; ++c) image(c, y, x) = std::clamp(inst.color[c] + t, 0.0, 1.0);
            mask(y, x) = inst.cls;
        }
    }
}

void render_background(Rng& rng, Image& image) {
    const int size = image.height();
    const double base = uniform(rng, 0.3, 0.55);
    const double gy = uniform(rng, -0.15, 0.15);
    const double gx = uniform(rng, -0.15, 0.15);
    const double tint = uniform(rng, -0.04, 0.04);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double g = base + gy * (y / double(size) - 0.5) + gx * (x / double(size) - 0.5);
            const double noise = uniform(rng, -0.05, 0.05);
            image(0, y, x) = std::clamp(g + noise + tint, 0.0, 1.0);
            image(1, y, x) = std::clamp(g + noise, 0.0, 1.0);
            image(2, y, x) = std::clamp(g + noise - tint, 0.0, 1.0);
        }
    }
}

std::optional<fs::path> first_existing(const fs::path& root, std::initializer_list<const char*> names) {
    for (const char* n : names) {
        if (fs::is_directory(root / n)) return root / n;
    }
    return std::nullopt;
}

}  // namespace

void Dataset::add(Entry entry) {
    entry.present = present_classes(entry.mask, total_);
    entries_.push_back(std::move(entry));
}

Dataset Dataset::from_samples(std::vector<SegSample> samples, int total_foreground_classes) {
    Dataset ds;
    ds.total_ = total_foreground_classes;
    for (auto& s : samples) {
        if (!s.mask.same_extent(s.image.height(), s.image.width()) || s.image.channels() != 3) {
            throw DataError(fmt::format("sample '{}': image and mask extents differ", s.id));
        }
        for (ClassId v : s.mask.values()) {
            if (v != kIgnoreId && v > total_foreground_classes) {
                throw DataError(fmt::format("sample '{}': illegal label value {}", s.id, v));
            }
        }
        ds.add(Entry{std::move(s.id), std::move(s.mask), {}, std::move(s.image), {}});
    }
    return ds;
}

SegSample Dataset::sample(std::size_t i) const {
    const Entry& e = entries_.at(i);
    SegSample s{e.id, e.image ? *e.image : read_png_rgb(e.image_path), e.mask};
    if (!s.mask.same_extent(s.image.height(), s.image.width())) {
        throw DataError(fmt::format("sample '{}': image and mask extents differ", e.id));
    }
    return s;
}

std::optional<std::size_t> Dataset::find(const std::string& id) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].id == id) return i;
    }
    return std::nullopt;
}

Dataset generate_synthetic_dataset(const SyntheticSpec& spec) {
    if (spec.num_classes < 2 || spec.num_classes > kMaxForegroundClasses) {
        throw ConfigError(fmt::format("synthetic dataset needs 2..{} classes, got {}", kMaxForegroundClasses,
                                      spec.num_classes));
    }
    if (spec.image_size < 16) {
        throw ConfigError(fmt::format("image size {} is too small to place shapes (minimum 16)", spec.image_size));
    }
    if (spec.samples_per_class < 1) throw ConfigError("samples_per_class must be >= 1");

    Rng rng(derive_seed(spec.seed, "synthetic"));
    std::vector<SegSample> samples;
    const int size = spec.image_size;
    int index = 0;
    for (int rep = 0; rep < spec.samples_per_class; ++rep) {
        for (int c = 1; c <= spec.num_classes; ++c) {
            Image image(3, size, size);
            LabelGrid mask(size, size, kUnknownId);
            render_background(rng, image);
            const int extras = uniform_int(rng, 0, 2);
            for (int e = 0; e < extras; ++e) {
                int other = uniform_int(rng, 1, spec.num_classes - 1);
                if (other >= c) ++other;
                render_instance(draw_instance(rng, static_cast<ClassId>(other), spec.num_classes, size), image,
                                mask);
            }
            render_instance(draw_instance(rng, static_cast<ClassId>(c), spec.num_classes, size), image, mask);
            samples.push_back({fmt::format("img_{:05d}", index++), std::move(image), std::move(mask)});
        }
    }
    return Dataset::from_samples(std::move(samples), spec.num_classes);
}

Dataset load_voc_style(const fs::path& root, int total_foreground_classes) {
    Dataset ds;
    ds.total_ = total_foreground_classes;
    if (!fs::is_directory(root)) throw DataError(fmt::format("dataset root '{}' is not a directory", root.string()));
    const auto image_dir = first_existing(root, {"images", "JPEGImages"});
    const auto mask_dir = first_existing(root, {"masks", "SegmentationClass", "SegmentationClassAug"});
    std::vector<fs::path> images;
    if (image_dir) {
        for (const auto& entry : fs::directory_iterator(*image_dir)) {
            if (entry.is_regular_file() && entry.path().extension() == ".png") images.push_back(entry.path());
        }
    }
    std::sort(images.begin(), images.end());
    if (images.empty()) {
        spdlog::warn("dataset root '{}' contains no PNG images", root.string());
        return ds;
    }
    if (!mask_dir) throw DataError(fmt::format("dataset root '{}' has no masks/ directory", root.string()));
    for (const auto& img : images) {
        const fs::path mask_path = *mask_dir / (img.stem().string() + ".png");
        if (!fs::exists(mask_path)) {
            throw DataError(fmt::format("missing mask for image '{}' (expected '{}')", img.string(),
                                        mask_path.string()));
        }
        LabelGrid mask = read_png_labels(mask_path);
        for (ClassId v : mask.values()) {
            if (v != kIgnoreId && v > total_foreground_classes) {
                throw DataError(fmt::format("mask '{}' contains illegal label value {}", mask_path.string(), v));
            }
        }
        ds.add(Dataset::Entry{img.stem().string(), std::move(mask), {}, std::nullopt, img});
    }
    return ds;
}

void write_voc_style(const Dataset& dataset, const fs::path& root) {
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const SegSample s = dataset.sample(i);
        write_png_rgb(root / "images" / (s.id + ".png"), s.image);
        write_png_labels(root / "masks" / (s.id + ".png"), s.mask);
    }
}

AugmentParams sample_augment_params(int height, int width, int out_height, int out_width, std::uint64_t seed,
                                    const AugmentConfig& config) {
    Rng rng(seed);
    AugmentParams p;
    p.out_height = out_height;
    p.out_width = out_width;
    p.flip = uniform01(rng) < config.flip_probability;
    p.scale = uniform(rng, config.min_scale, config.max_scale);
    const int sh = std::max(1, static_cast<int>(std::lround(height * p.scale)));
    const int sw = std::max(1, static_cast<int>(std::lround(width * p.scale)));
    p.offset_y = uniform_int(rng, std::min(0, sh - out_height), std::max(0, sh - out_height));
    p.offset_x = uniform_int(rng, std::min(0, sw - out_width), std::max(0, sw - out_width));
    return p;
}

namespace {

struct ScaledFrame {
    int sh, sw;
};

ScaledFrame scaled_frame(int h, int w, const AugmentParams& p) {
    return {std::max(1, static_cast<int>(std::lround(h * p.scale))),
            std::max(1, static_cast<int>(std::lround(w * p.scale)))};
}

}  // namespace

template <typename T>
Grid<T> warp_nearest(const Grid<T>& grid, const AugmentParams& p, T pad_value) {
    const auto [sh, sw] = scaled_frame(grid.height(), grid.width(), p);
    Grid<T> out(p.out_height, p.out_width, pad_value);
    for (int i = 0; i < p.out_height; ++i) {
        const int yy = i + p.offset_y;
        if (yy < 0 || yy >= sh) continue;
        const int sy = std::min(grid.height() - 1, static_cast<int>((yy + 0.5) * grid.height() / sh));
        for (int j = 0; j < p.out_width; ++j) {
            int xx = j + p.offset_x;
            if (xx < 0 || xx >= sw) continue;
            if (p.flip) xx = sw - 1 - xx;
            const int sx = std::min(grid.width() - 1, static_cast<int>((xx + 0.5) * grid.width() / sw));
            out(i, j) = grid(sy, sx);
        }
    }
    return out;
}

template Grid<ClassId> warp_nearest(const Grid<ClassId>&, const AugmentParams&, ClassId);
template Grid<std::uint16_t> warp_nearest(const Grid<std::uint16_t>&, const AugmentParams&, std::uint16_t);

SegSample apply_augment(const SegSample& sample, const AugmentParams& p) {
    const int h = sample.image.height();
    const int w = sample.image.width();
    const auto [sh, sw] = scaled_frame(h, w, p);
    SegSample out{sample.id, Image(3, p.out_height, p.out_width), warp_nearest(sample.mask, p, kIgnoreId)};
    const double ry = static_cast<double>(h) / sh;
    const double rx = static_cast<double>(w) / sw;
    for (int i = 0; i < p.out_height; ++i) {
        const int yy = i + p.offset_y;
        if (yy < 0 || yy >= sh) continue;
        const double fy = std::clamp((yy + 0.5) * ry - 0.5, 0.0, h - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(h - 1, y0 + 1);
        const double ly = fy - y0;
        for (int j = 0; j < p.out_width; ++j) {
            int xx = j + p.offset_x;
            if (xx < 0 || xx >= sw) continue;
            if (p.flip) xx = sw - 1 - xx;
            const double fx = std::clamp((xx + 0.5) * rx - 0.5, 0.0, w - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(w - 1, x0 + 1);
            const double lx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const auto& im = sample.image;
                out.image(c, i, j) = (1 - ly) * ((1 - lx) * im(c, y0, x0) + lx * im(c, y0, x1)) +
                                     ly * ((1 - lx) * im(c, y1, x0) + lx * im(c, y1, x1));
            }
        }
    }
    return out;
}

SegSample augment(const SegSample& sample, std::uint64_t seed, int out_height, int out_width,
                  const AugmentConfig& config) {
    return apply_augment(
        sample, sample_augment_params(sample.image.height(), sample.image.width(), out_height, out_width, seed, config));
}

SegSample hflip(const SegSample& sample) {
    AugmentParams p;
    p.flip = true;
    p.out_height = sample.image.height();
    p.out_width = sample.image.width();
    return apply_augment(sample, p);
}

MemoryBank sample_memory(const Dataset& dataset, std::span<const ClassId> seen, int capacity, std::uint64_t seed,
                         std::span<const std::size_t> candidates) {
    if (capacity < 0) throw ConfigError("memory capacity must be non-negative");
    std::vector<std::size_t> pool;
    if (candidates.empty()) {
        pool.resize(dataset.size());
        for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    } else {
        pool.assign(candidates.begin(), candidates.end());
        std::sort(pool.begin(), pool.end());
        pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
    }
    Rng rng(derive_seed(seed, "memory"));
    std::shuffle(pool.begin(), pool.end(), rng);

    std::array<bool, 256> wanted{};
    for (ClassId c : seen) wanted[c] = true;
    std::array<int, 256> carriers{};
    for (std::size_t idx : pool) {
        for (ClassId c : dataset.classes_present(idx)) ++carriers[c];
    }
    // Rarest classes first so single-carrier classes always get their image.
    std::vector<ClassId> order;
    for (ClassId c : seen) {
        if (carriers[c] > 0) order.push_back(c);
    }
    std::stable_sort(order.begin(), order.end(), [&](ClassId a, ClassId b) { return carriers[a] < carriers[b]; });

    MemoryBank bank;
    bank.capacity = capacity;
    std::vector<bool> taken(dataset.size(), false);
    std::array<bool, 256> covered{};
    auto take = [&](std::size_t idx) {
        taken[idx] = true;
        bank.indices.push_back(idx);
        for (ClassId c : dataset.classes_present(idx)) covered[c] = true;
    };
    for (ClassId c : order) {
        if (covered[c]) continue;
        if (static_cast<int>(bank.indices.size()) >= capacity) break;
        for (std::size_t idx : pool) {
            const auto& present = dataset.classes_present(idx);
            if (!taken[idx] && std::binary_search(present.begin(), present.end(), c)) {
                take(idx);
                break;
            }
        }
    }
    int uncovered = 0;
    for (ClassId c : order) uncovered += covered[c] ? 0 : 1;
    if (uncovered > 0) {
        spdlog::warn("memory capacity {} cannot cover all {} seen classes; {} left uncovered", capacity, seen.size(),
                     uncovered);
    }
    for (std::size_t idx : pool) {
        if (static_cast<int>(bank.indices.size()) >= capacity) break;
        if (taken[idx]) continue;
        // Fill only with samples that show some seen class.
        const auto& present = dataset.classes_present(idx);
        if (std::none_of(present.begin(), present.end(), [&](ClassId c) { return wanted[c]; })) continue;
        take(idx);
    }
    for (std::size_t idx : bank.indices) bank.ids.push_back(dataset.id(idx));
    return bank;
}

nlohmann::json memory_manifest_entry(const MemoryBank& bank, int step) {
    return {{"step", step}, {"capacity", bank.capacity}, {"ids", bank.ids}};
}

}  // namespace coinseg

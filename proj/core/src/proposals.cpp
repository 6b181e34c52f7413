#include "coinseg/proposals.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "coinseg/data.hpp"
#include "coinseg/errors.hpp"
#include "coinseg/parallel.hpp"

namespace coinseg {
namespace {

class DisjointSet {
  public:
    explicit DisjointSet(int n) : parent_(n), size_(n, 1), internal_(n, 0.0) {
        std::iota(parent_.begin(), parent_.end(), 0);
    }
    int find(int x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }
    // Smaller index becomes the root so the result does not depend on call order.
    int join(int a, int b, double weight) {
        if (a > b) std::swap(a, b);
        parent_[b] = a;
        size_[a] += size_[b];
        internal_[a] = std::max({internal_[a], internal_[b], weight});
        return a;
    }
    int size(int x) const { return size_[x]; }
    double internal(int x) const { return internal_[x]; }

  private:
    std::vector<int> parent_;
    std::vector<int> size_;
    std::vector<double> internal_;
};

struct Edge {
    int a, b;
    double w;
};

double color_distance(const Image& img, int p, int q) {
    double d = 0.0;
    for (int c = 0; c < 3; ++c) {
        const auto ch = img.channel(c);
        const double diff = 255.0 * (ch[p] - ch[q]);
        d += diff * diff;
    }
    return std::sqrt(d);
}

// Collapses union-find labels to consecutive ids in raster order of first pixel.
std::vector<int> compact_labels(DisjointSet& ds, int n, int& count) {
    std::vector<int> remap(n, -1);
    std::vector<int> out(n);
    count = 0;
    for (int p = 0; p < n; ++p) {
        const int r = ds.find(p);
        if (remap[r] < 0) remap[r] = count++;
        out[p] = remap[r];
    }
    return out;
}

// Source-row (or column) contributions to each target cell under area averaging.
struct Overlap {
    int target;
    double weight;
};

std::vector<std::vector<Overlap>> axis_overlaps(int source, int target) {
    std::vector<std::vector<Overlap>> out(source);
    const double cell = static_cast<double>(source) / target;
    for (int s = 0; s < source; ++s) {
        const double lo = s;
        const double hi = s + 1.0;
        const int first = static_cast<int>(std::floor(lo / cell));
        const int last = std::min(target - 1, static_cast<int>(std::ceil(hi / cell)) - 1);
        for (int t = first; t <= last; ++t) {
            const double ov = std::min(hi, (t + 1) * cell) - std::max(lo, t * cell);
            if (ov > 0) out[s].push_back({t, ov / cell});
        }
    }
    return out;
}

void check_target(int sh, int sw, int h, int w) {
    if (h < 1 || w < 1 || h > sh || w > sw) {
        throw ConfigError(fmt::format("cannot downsample {}x{} to larger or empty extent {}x{}", sh, sw, h, w));
    }
}

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("truncated proposal cache");
    return v;
}

constexpr char kCacheMagic[4] = {'C', 'S', 'P', 'C'};
constexpr std::uint32_t kCacheVersion = 1;

}  // namespace

MaskProposalSet::MaskProposalSet(int slots, Grid<std::uint16_t> assignment)
    : slots_(slots), assignment_(std::move(assignment)) {
    int max_id = -1;
    for (auto v : assignment_.values()) {
        if (v != kNoProposal) max_id = std::max<int>(max_id, v);
    }
    regions_ = max_id + 1;
    if (regions_ > slots_) {
        throw DataError(fmt::format("proposal set has {} regions but only {} slots", regions_, slots_));
    }
}

Grid<std::uint8_t> MaskProposalSet::mask(int n) const {
    Grid<std::uint8_t> m(height(), width(), 0);
    for (std::size_t i = 0; i < assignment_.size(); ++i) m[i] = assignment_[i] == n ? 1 : 0;
    return m;
}

std::vector<Grid<std::uint8_t>> MaskProposalSet::masks() const {
    std::vector<Grid<std::uint8_t>> out;
    out.reserve(static_cast<std::size_t>(slots_));
    for (int n = 0; n < slots_; ++n) out.push_back(mask(n));
    return out;
}

MaskProposalSet generate_proposals(const Image& image, int slots, const ProposalConfig& config) {
    if (slots < 2) throw ConfigError(fmt::format("proposal count N must be >= 2, got {}", slots));
    if (slots >= kNoProposal) throw ConfigError("proposal count N too large");
    const int h = image.height();
    const int w = image.width();
    const int n = h * w;

    std::vector<Edge> edges;
    edges.reserve(static_cast<std::size_t>(n) * 4);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int p = y * w + x;
            auto add = [&](int yy, int xx) {
                if (yy < 0 || yy >= h || xx >= w) return;
                const int q = yy * w + xx;
                edges.push_back({p, q, color_distance(image, p, q)});
            };
            add(y, x + 1);
            add(y + 1, x);
            add(y + 1, x + 1);
            add(y - 1, x + 1);
        }
    }
    std::stable_sort(edges.begin(), edges.end(), [](const Edge& l, const Edge& r) { return l.w < r.w; });

    DisjointSet ds(n);
    for (const Edge& e : edges) {
        const int a = ds.find(e.a);
        const int b = ds.find(e.b);
        if (a == b) continue;
        const double ta = ds.internal(a) + config.k / ds.size(a);
        const double tb = ds.internal(b) + config.k / ds.size(b);
        if (e.w <= std::min(ta, tb)) ds.join(a, b, e.w);
    }
    for (const Edge& e : edges) {
        const int a = ds.find(e.a);
        const int b = ds.find(e.b);
        if (a != b && (ds.size(a) < config.min_size || ds.size(b) < config.min_size)) ds.join(a, b, e.w);
    }

    int count = 0;
    std::vector<int> label = compact_labels(ds, n, count);

    if (count > slots) {
        // Region statistics for the similarity-driven reduction.
        std::vector<int> area(count, 0);
        std::vector<std::array<double, 3>> sum(count, {0, 0, 0});
        for (int p = 0; p < n; ++p) {
            ++area[label[p]];
            for (int c = 0; c < 3; ++c) sum[label[p]][c] += image.channel(c)[p];
        }
        std::vector<int> parent(count);
        std::iota(parent.begin(), parent.end(), 0);
        auto root = [&](int r) {
            while (parent[r] != r) r = parent[r] = parent[parent[r]];
            return r;
        };
        std::vector<std::pair<int, int>> adjacency;
        for (const Edge& e : edges) {
            const int a = label[e.a];
            const int b = label[e.b];
            if (a != b) adjacency.emplace_back(std::min(a, b), std::max(a, b));
        }
        std::sort(adjacency.begin(), adjacency.end());
        adjacency.erase(std::unique(adjacency.begin(), adjacency.end()), adjacency.end());

        int alive = count;
        while (alive > slots) {
            int smallest = -1;
            for (int r = 0; r < count; ++r) {
                if (root(r) == r && (smallest < 0 || area[r] < area[smallest])) smallest = r;
            }
            int best = -1;
            double best_d = 0.0;
            for (const auto& [a, b] : adjacency) {
                const int ra = root(a);
                const int rb = root(b);
                if (ra == rb || (ra != smallest && rb != smallest)) continue;
                const int other = ra == smallest ? rb : ra;
                double d = 0.0;
                for (int c = 0; c < 3; ++c) {
                    const double diff = sum[smallest][c] / area[smallest] - sum[other][c] / area[other];
                    d += diff * diff;
                }
                if (best < 0 || d < best_d || (d == best_d && other < best)) {
                    best = other;
                    best_d = d;
                }
            }
            if (best < 0) break;  // isolated region; cannot happen on a connected grid
            const int keep = std::min(smallest, best);
            const int drop = std::max(smallest, best);
            parent[drop] = keep;
            area[keep] += area[drop];
            for (int c = 0; c < 3; ++c) sum[keep][c] += sum[drop][c];
            --alive;
        }
        std::vector<int> remap(count, -1);
        int next = 0;
        for (int p = 0; p < n; ++p) {
            const int r = root(label[p]);
            if (remap[r] < 0) remap[r] = next++;
            label[p] = remap[r];
        }
    }

    Grid<std::uint16_t> assignment(h, w);
    for (int p = 0; p < n; ++p) assignment[static_cast<std::size_t>(p)] = static_cast<std::uint16_t>(label[p]);
    return MaskProposalSet(slots, std::move(assignment));
}

RealGrid area_downsample(const RealGrid& source, int height, int width) {
    check_target(source.height(), source.width(), height, width);
    const auto rows = axis_overlaps(source.height(), height);
    const auto cols = axis_overlaps(source.width(), width);
    RealGrid out(height, width, 0.0);
    for (int y = 0; y < source.height(); ++y) {
        for (int x = 0; x < source.width(); ++x) {
            const double v = source(y, x);
            if (v == 0.0) continue;
            for (const auto& ry : rows[y]) {
                for (const auto& rx : cols[x]) out(ry.target, rx.target) += v * ry.weight * rx.weight;
            }
        }
    }
    return out;
}

std::vector<RealGrid> downsample_masks(const MaskProposalSet& proposals, int height, int width) {
    check_target(proposals.height(), proposals.width(), height, width);
    const auto rows = axis_overlaps(proposals.height(), height);
    const auto cols = axis_overlaps(proposals.width(), width);
    std::vector<RealGrid> out(static_cast<std::size_t>(proposals.slots()), RealGrid(height, width, 0.0));
    const auto& a = proposals.assignment();
    for (int y = 0; y < a.height(); ++y) {
        for (int x = 0; x < a.width(); ++x) {
            const auto n = a(y, x);
            if (n == kNoProposal) continue;
            for (const auto& ry : rows[y]) {
                for (const auto& rx : cols[x]) out[n](ry.target, rx.target) += ry.weight * rx.weight;
            }
        }
    }
    return out;
}

std::vector<RealGrid> downsample_masks(const std::vector<Grid<std::uint8_t>>& masks, int height, int width) {
    std::vector<RealGrid> out;
    out.reserve(masks.size());
    for (const auto& m : masks) {
        RealGrid r(m.height(), m.width());
        for (std::size_t i = 0; i < m.size(); ++i) r[i] = m[i] ? 1.0 : 0.0;
        out.push_back(area_downsample(r, height, width));
    }
    return out;
}

void ProposalCache::put(const std::string& id, MaskProposalSet proposals) {
    entries_.insert_or_assign(id, std::move(proposals));
}

const MaskProposalSet& ProposalCache::get(const std::string& id) const {
    const auto it = entries_.find(id);
    if (it == entries_.end()) throw DataError(fmt::format("no cached proposals for sample '{}'", id));
    return it->second;
}

// Layout (little-endian): magic "CSPC", u32 version, u32 entry count, then per
// entry: u16 id length, id bytes, u16 N, u16 H, u16 W, u16 non-empty count R,
// followed by R bitmasks of H*W bits, row-major, LSB first.
void ProposalCache::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError(fmt::format("cannot write proposal cache '{}'", path.string()));
    os.write(kCacheMagic, 4);
    write_pod<std::uint32_t>(os, kCacheVersion);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [id, set] : entries_) {
        write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(id.size()));
        os.write(id.data(), static_cast<std::streamsize>(id.size()));
        write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(set.slots()));
        write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(set.height()));
        write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(set.width()));
        write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(set.region_count()));
        const auto& a = set.assignment();
        const std::size_t bytes = (a.size() + 7) / 8;
        for (int r = 0; r < set.region_count(); ++r) {
            std::vector<char> bits(bytes, 0);
            for (std::size_t i = 0; i < a.size(); ++i) {
                if (a[i] == r) bits[i / 8] = static_cast<char>(bits[i / 8] | (1 << (i % 8)));
            }
            os.write(bits.data(), static_cast<std::streamsize>(bytes));
        }
    }
    if (!os) throw DataError(fmt::format("cannot write proposal cache '{}'", path.string()));
}

ProposalCache ProposalCache::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError(fmt::format("cannot open proposal cache '{}'", path.string()));
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCacheMagic, 4) != 0) {
        throw DataError(fmt::format("'{}' is not a proposal cache", path.string()));
    }
    if (read_pod<std::uint32_t>(is) != kCacheVersion) throw DataError("unsupported proposal cache version");
    const auto count = read_pod<std::uint32_t>(is);
    ProposalCache cache;
    for (std::uint32_t e = 0; e < count; ++e) {
        std::string id(read_pod<std::uint16_t>(is), '\0');
        is.read(id.data(), static_cast<std::streamsize>(id.size()));
        const int slots = read_pod<std::uint16_t>(is);
        const int h = read_pod<std::uint16_t>(is);
        const int w = read_pod<std::uint16_t>(is);
        const int regions = read_pod<std::uint16_t>(is);
        Grid<std::uint16_t> a(h, w, kNoProposal);
        const std::size_t bytes = (a.size() + 7) / 8;
        std::vector<char> bits(bytes);
        for (int r = 0; r < regions; ++r) {
            is.read(bits.data(), static_cast<std::streamsize>(bytes));
            if (!is) throw DataError("truncated proposal cache");
            for (std::size_t i = 0; i < a.size(); ++i) {
                if ((bits[i / 8] >> (i % 8)) & 1) {
                    if (a[i] != kNoProposal) throw DataError(fmt::format("cached proposals for '{}' overlap", id));
                    a[i] = static_cast<std::uint16_t>(r);
                }
            }
        }
        if (std::find(a.values().begin(), a.values().end(), kNoProposal) != a.values().end()) {
            throw DataError(fmt::format("cached proposals for '{}' do not cover every pixel", id));
        }
        cache.put(id, MaskProposalSet(slots, std::move(a)));
    }
    return cache;
}

ProposalCache build_proposal_cache(const Dataset& dataset, int slots, const ProposalConfig& config, int workers) {
    std::vector<MaskProposalSet> results(dataset.size());
    parallel_for(dataset.size(), workers,
                 [&](std::size_t i) { results[i] = generate_proposals(dataset.sample(i).image, slots, config); });
    ProposalCache cache;
    for (std::size_t i = 0; i < dataset.size(); ++i) cache.put(dataset.id(i), std::move(results[i]));
    return cache;
}

}  // namespace coinseg

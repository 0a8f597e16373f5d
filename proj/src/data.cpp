#include "jemb/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "jemb/binary_io.hpp"
#include "jemb/error.hpp"

namespace jemb {

namespace {

using Rgb = std::array<double, 3>;

struct Palette {
    Rgb sky;
    Rgb ground;
    std::array<Rgb, 3> objects;
};

// Hand-picked palettes for the first four classes; further classes are drawn
// from a fixed stream so any class count renders deterministically.
Palette palette_for(int appearance_class) {
    static const Palette kBase[] = {
        {{0.55, 0.75, 0.95}, {0.60, 0.55, 0.40}, {{{0.90, 0.20, 0.15}, {0.95, 0.85, 0.20}, {0.20, 0.45, 0.90}}}},
        {{0.05, 0.08, 0.25}, {0.15, 0.15, 0.20}, {{{0.95, 0.80, 0.40}, {0.40, 0.90, 0.95}, {0.90, 0.35, 0.70}}}},
        {{0.85, 0.90, 0.80}, {0.30, 0.60, 0.25}, {{{0.50, 0.20, 0.60}, {0.95, 0.55, 0.10}, {0.10, 0.20, 0.35}}}},
        {{0.20, 0.05, 0.20}, {0.25, 0.10, 0.05}, {{{0.30, 0.95, 0.40}, {0.95, 0.95, 0.85}, {0.95, 0.30, 0.15}}}},
    };
    if (appearance_class < 4) return kBase[appearance_class];
    Rng r = Rng::derive(0x9a1e77e5u, static_cast<std::uint64_t>(appearance_class));
    const bool day = appearance_class % 2 == 0;
    Palette p;
    for (double& c : p.sky) c = day ? r.uniform(0.5, 1.0) : r.uniform(0.0, 0.3);
    for (double& c : p.ground) c = day ? r.uniform(0.2, 0.7) : r.uniform(0.0, 0.3);
    for (auto& obj : p.objects)
        for (double& c : obj) c = r.uniform(0.1, 1.0);
    return p;
}

constexpr double kViewShift = 0.4;  // image widths per radian
constexpr double kHorizon = 0.3;    // fraction of image height
constexpr double kNearGround = 2.0;  // meters at the bottom row
constexpr double kFar = 0.95 * kMaxRange;

bool covers(const ShapeParams& s, double view_angle, double px, double py) {
    const double cx = s.x + kViewShift * view_angle;
    const double dx = px - cx, dy = py - s.y;
    switch (s.kind) {
        case ShapeKind::rectangle:
            return std::abs(dx) <= s.size && std::abs(dy) <= 0.7 * s.size;
        case ShapeKind::disc:
            return dx * dx + dy * dy <= s.size * s.size;
        case ShapeKind::triangle:
            return dy >= -s.size && dy <= s.size && std::abs(dx) <= 0.5 * (dy + s.size);
    }
    return false;
}

double ground_depth(double py) {
    if (py <= kHorizon) return kFar;
    return std::min(kFar, kNearGround / ((py - kHorizon) / (1.0 - kHorizon)));
}

void write_factors(std::ostream& out, const SceneFactors& f) {
    if (f.shapes.size() > kMaxShapes) throw Error("scene has more than 4 shapes");
    binary::write_pod<std::int32_t>(out, f.appearance_class);
    binary::write_pod<std::int32_t>(out, f.structure_class);
    binary::write_pod<double>(out, f.view_angle);
    binary::write_pod<double>(out, f.illumination);
    binary::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(f.shapes.size()));
    for (std::size_t k = 0; k < kMaxShapes; ++k) {
        const ShapeParams s = k < f.shapes.size() ? f.shapes[k] : ShapeParams{};
        binary::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.kind));
        binary::write_pod<double>(out, s.x);
        binary::write_pod<double>(out, s.y);
        binary::write_pod<double>(out, s.size);
        binary::write_pod<double>(out, s.depth);
    }
}

SceneFactors read_factors(std::istream& in) {
    SceneFactors f;
    f.appearance_class = binary::read_pod<std::int32_t>(in, "appearance class");
    f.structure_class = binary::read_pod<std::int32_t>(in, "structure class");
    f.view_angle = binary::read_pod<double>(in, "view angle");
    f.illumination = binary::read_pod<double>(in, "illumination");
    const auto count_at = binary::position(in);
    const auto count = binary::read_pod<std::uint32_t>(in, "shape count");
    if (count > kMaxShapes) throw FormatError("shape count " + std::to_string(count) + " exceeds 4", count_at);
    for (std::size_t k = 0; k < kMaxShapes; ++k) {
        ShapeParams s;
        const auto kind_at = binary::position(in);
        const auto kind = binary::read_pod<std::uint32_t>(in, "shape kind");
        if (kind > 2) throw FormatError("unknown shape kind " + std::to_string(kind), kind_at);
        s.kind = static_cast<ShapeKind>(kind);
        s.x = binary::read_pod<double>(in, "shape x");
        s.y = binary::read_pod<double>(in, "shape y");
        s.size = binary::read_pod<double>(in, "shape size");
        s.depth = binary::read_pod<double>(in, "shape depth");
        if (k < count) f.shapes.push_back(s);
    }
    return f;
}

Tensor stack(std::span<const MultimodalSample> samples, std::span<const std::size_t> idx, bool rgb) {
    if (idx.empty()) throw ShapeError("stack: empty index list");
    const Tensor& first = rgb ? samples[idx[0]].rgb : samples[idx[0]].depth;
    Shape shape{idx.size()};
    shape.insert(shape.end(), first.shape().begin(), first.shape().end());
    std::vector<double> out;
    out.reserve(shape_numel(shape));
    for (std::size_t i : idx) {
        const Tensor& t = rgb ? samples[i].rgb : samples[i].depth;
        if (t.shape() != first.shape()) throw ShapeError("stack: images differ in shape");
        out.insert(out.end(), t.data().begin(), t.data().end());
    }
    return Tensor(std::move(shape), std::move(out));
}

}  // namespace

SceneFactors sample_factors(Rng& rng, int palettes, int layouts) {
    if (palettes < 2 || layouts < 2) throw ConfigError("generator needs at least 2 palettes and 2 layouts");
    SceneFactors f;
    f.appearance_class = static_cast<int>(rng.index(static_cast<std::size_t>(palettes)));
    f.structure_class = static_cast<int>(rng.index(static_cast<std::size_t>(layouts)));
    f.view_angle = rng.uniform(-0.3, 0.3);
    f.illumination = f.appearance_class % 2 == 0 ? rng.uniform(0.8, 1.0) : rng.uniform(0.25, 0.4);

    // The layout fixes object count, kinds and base placement; each sample jitters it.
    Rng layout = Rng::derive(0x1a7047u, static_cast<std::uint64_t>(f.structure_class));
    const std::size_t count = 1 + static_cast<std::size_t>(f.structure_class) % kMaxShapes;
    for (std::size_t k = 0; k < count; ++k) {
        ShapeParams s;
        s.kind = static_cast<ShapeKind>(layout.index(3));
        s.x = layout.uniform(0.2, 0.8);
        s.y = layout.uniform(0.35, 0.8);
        s.size = layout.uniform(0.1, 0.22);
        s.depth = layout.uniform(2.5, 9.0);
        f.shapes.push_back(s);
    }
    for (auto& s : f.shapes) {
        s.x = std::clamp(s.x + rng.uniform(-0.1, 0.1), 0.05, 0.95);
        s.y = std::clamp(s.y + rng.uniform(-0.1, 0.1), 0.05, 0.95);
        s.size *= rng.uniform(0.75, 1.25);
        s.depth += rng.uniform(-1.0, 1.0);
    }
    return f;
}

MultimodalSample render_scene(const SceneFactors& f, std::size_t size) {
    if (size < 16) throw ConfigError("scene size must be at least 16");
    const Palette pal = palette_for(f.appearance_class);
    // Painter's order: far objects first.
    std::vector<std::size_t> order(f.shapes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return f.shapes[a].depth > f.shapes[b].depth; });

    const std::size_t plane = size * size;
    std::vector<double> rgb(3 * plane);
    std::vector<double> dense(plane);
    for (std::size_t v = 0; v < size; ++v) {
        const double py = (static_cast<double>(v) + 0.5) / static_cast<double>(size);
        const double t = static_cast<double>(v) / static_cast<double>(size - 1);
        for (std::size_t u = 0; u < size; ++u) {
            const double px = (static_cast<double>(u) + 0.5) / static_cast<double>(size);
            Rgb color;
            for (int c = 0; c < 3; ++c) color[c] = (1.0 - t) * pal.sky[c] + t * pal.ground[c];
            double depth = ground_depth(py);
            for (std::size_t k : order) {
                const ShapeParams& s = f.shapes[k];
                if (!covers(s, f.view_angle, px, py)) continue;
                depth = s.depth;
                const double shade = 1.0 - 0.4 * s.depth / kMaxRange;
                for (int c = 0; c < 3; ++c) color[c] = pal.objects[k % 3][c] * shade;
            }
            for (int c = 0; c < 3; ++c) rgb[c * plane + v * size + u] = std::clamp(color[c] * f.illumination, 0.0, 1.0);
            dense[v * size + u] = depth;
        }
    }

    // Depth goes through a scanning-sensor simulation: a staggered quarter of
    // the pixels become 3D returns, which are projected and densified again.
    PointCloud pc;
    pc.intrinsics = default_intrinsics(size);
    for (std::size_t v = 0; v < size; v += 2) {
        for (std::size_t u = (v / 2) % 2; u < size; u += 2) {
            const double z = dense[v * size + u];
            pc.points.push_back({(static_cast<double>(u) - pc.intrinsics.cx) * z / pc.intrinsics.fx,
                                 (static_cast<double>(v) - pc.intrinsics.cy) * z / pc.intrinsics.fy, z});
        }
    }
    Tensor depth = densify_depth(project_pointcloud(pc, size));
    std::vector<double> normalized(plane);
    for (std::size_t i = 0; i < plane; ++i) normalized[i] = std::min(1.0, depth[i] / kMaxRange);

    MultimodalSample s;
    s.rgb = Tensor({3, size, size}, std::move(rgb));
    s.depth = Tensor({1, size, size}, std::move(normalized));
    s.factors = f;
    return s;
}

MultimodalSample generate_scene(Rng& rng, int palettes, int layouts, std::size_t size) {
    if (size < 16) throw ConfigError("scene size must be at least 16");
    return render_scene(sample_factors(rng, palettes, layouts), size);
}

std::vector<MultimodalSample> generate_dataset(std::size_t n, int palettes, int layouts, std::size_t size,
                                               std::uint64_t seed) {
    std::vector<MultimodalSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = Rng::derive(seed, i);
        out.push_back(generate_scene(rng, palettes, layouts, size));
    }
    return out;
}

Intrinsics default_intrinsics(std::size_t size) {
    const double s = static_cast<double>(size);
    return {s, s, s / 2.0, s / 2.0};
}

Tensor project_pointcloud(const PointCloud& pc, std::size_t size) {
    const auto& k = pc.intrinsics;
    if (!std::isfinite(k.fx) || !std::isfinite(k.fy) || !std::isfinite(k.cx) || !std::isfinite(k.cy)) {
        throw DomainError("project_pointcloud: intrinsics must be finite");
    }
    Tensor out({size, size}, 0.0);
    auto img = out.mutable_data();
    for (const auto& [x, y, z] : pc.points) {
        if (!(z > 0.0)) continue;
        const double u = std::round(k.fx * x / z + k.cx);
        const double v = std::round(k.fy * y / z + k.cy);
        if (!(u >= 0.0 && v >= 0.0 && u < static_cast<double>(size) && v < static_cast<double>(size))) continue;
        double& px = img[static_cast<std::size_t>(v) * size + static_cast<std::size_t>(u)];
        if (px == 0.0 || z < px) px = z;
    }
    return out;
}

Tensor densify_depth(const Tensor& sparse) {
    if (sparse.rank() != 2) throw ShapeError("densify_depth: expected (H,W), got " + shape_str(sparse.shape()));
    const std::size_t h = sparse.dim(0), w = sparse.dim(1);
    std::vector<std::size_t> seeds;
    for (std::size_t i = 0; i < h * w; ++i)
        if (sparse[i] != 0.0) seeds.push_back(i);
    if (seeds.empty()) throw DomainError("densify_depth: image has no nonzero pixel");

    std::vector<double> out(sparse.data().begin(), sparse.data().end());
    for (std::size_t i = 0; i < h * w; ++i) {
        if (out[i] != 0.0) continue;
        const long r = static_cast<long>(i / w), c = static_cast<long>(i % w);
        long best = -1;
        std::size_t best_seed = 0;
        for (std::size_t s : seeds) {
            const long dr = static_cast<long>(s / w) - r, dc = static_cast<long>(s % w) - c;
            const long d2 = dr * dr + dc * dc;
            if (best < 0 || d2 < best) {
                best = d2;
                best_seed = s;
            }
        }
        out[i] = sparse[best_seed];
    }
    return Tensor(sparse.shape(), std::move(out));
}

void write_dataset(std::ostream& out, std::span<const MultimodalSample> samples) {
    out.write("MMD1", 4);
    binary::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(samples.size()));
    for (const auto& s : samples) {
        write_tensor(out, s.rgb);
        write_tensor(out, s.depth);
        write_factors(out, s.factors);
    }
}

std::vector<MultimodalSample> read_dataset(std::istream& in) {
    binary::expect_magic(in, "MMD1");
    const auto count = binary::read_pod<std::uint32_t>(in, "MMD1 sample count");
    std::vector<MultimodalSample> out;
    out.reserve(std::min<std::uint32_t>(count, 1u << 16));
    for (std::uint32_t i = 0; i < count; ++i) {
        MultimodalSample s;
        const auto at = binary::position(in);
        s.rgb = read_tensor(in);
        s.depth = read_tensor(in);
        if (s.rgb.rank() != 3 || s.rgb.dim(0) != 3 || s.depth.rank() != 3 || s.depth.dim(0) != 1 ||
            s.rgb.dim(1) != s.depth.dim(1) || s.rgb.dim(2) != s.depth.dim(2)) {
            throw FormatError("sample " + std::to_string(i) + " has inconsistent image shapes", at);
        }
        s.factors = read_factors(in);
        out.push_back(std::move(s));
    }
    return out;
}

void save_dataset(const std::string& path, std::span<const MultimodalSample> samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    write_dataset(out, samples);
    if (!out) throw Error("failed writing dataset '" + path + "'");
}

std::vector<MultimodalSample> load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open dataset '" + path + "'");
    return read_dataset(in);
}

std::vector<MultimodalSample> load_tsr_directory(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw Error("not a directory: '" + dir + "'");
    const std::string suffix = "_rgb.tsr";
    std::vector<std::string> stems;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.size() > suffix.size() && name.ends_with(suffix)) stems.push_back(name.substr(0, name.size() - suffix.size()));
    }
    std::sort(stems.begin(), stems.end());
    std::vector<MultimodalSample> out;
    for (const auto& stem : stems) {
        const fs::path depth_path = fs::path(dir) / (stem + "_depth.tsr");
        if (!fs::exists(depth_path)) throw Error("missing depth image for '" + stem + "'");
        MultimodalSample s;
        s.rgb = load_tensor((fs::path(dir) / (stem + suffix)).string());
        s.depth = load_tensor(depth_path.string());
        if (s.rgb.rank() != 3 || s.rgb.dim(0) != 3 || s.depth.shape() != Shape{1, s.rgb.dim(1), s.rgb.dim(2)}) {
            throw ShapeError("pair '" + stem + "': expected (3,H,W) rgb and (1,H,W) depth, got " +
                             shape_str(s.rgb.shape()) + " and " + shape_str(s.depth.shape()));
        }
        s.factors.appearance_class = -1;
        s.factors.structure_class = -1;
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<std::vector<std::size_t>> stratified_split(std::span<const MultimodalSample> samples,
                                                       std::span<const double> fractions, Rng& rng) {
    if (fractions.empty()) throw ConfigError("split: no fractions given");
    double total = 0.0;
    for (double f : fractions) {
        if (!(f >= 0.0)) throw ConfigError("split: fractions must be non-negative");
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split: fractions must sum to 1");

    const std::size_t n = samples.size();
    // Partition sizes by largest remainder.
    std::vector<std::size_t> sizes(fractions.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t p = 0; p < fractions.size(); ++p) {
        const double exact = fractions[p] * static_cast<double>(n);
        sizes[p] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        assigned += sizes[p];
        remainders.push_back({exact - static_cast<double>(sizes[p]), p});
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++sizes[remainders[i % remainders.size()].second];

    // Shuffle within each class, then interleave classes by relative rank so
    // any contiguous run holds each class in proportion.
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < n; ++i) by_class[samples[i].factors.appearance_class].push_back(i);
    struct Keyed {
        double key;
        int cls;
        std::size_t index;
    };
    std::vector<Keyed> keyed;
    keyed.reserve(n);
    for (auto& [cls, members] : by_class) {
        std::shuffle(members.begin(), members.end(), rng.engine());
        for (std::size_t r = 0; r < members.size(); ++r) {
            keyed.push_back({(static_cast<double>(r) + 0.5) / static_cast<double>(members.size()), cls, members[r]});
        }
    }
    std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
        return a.key != b.key ? a.key < b.key : a.cls < b.cls;
    });

    std::vector<std::vector<std::size_t>> parts(fractions.size());
    std::size_t at = 0;
    for (std::size_t p = 0; p < sizes.size(); ++p)
        for (std::size_t k = 0; k < sizes[p]; ++k) parts[p].push_back(keyed[at++].index);
    return parts;
}

std::vector<MultimodalSample> select(std::span<const MultimodalSample> samples, std::span<const std::size_t> idx) {
    std::vector<MultimodalSample> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(samples[i]);
    return out;
}

Tensor stack_rgb(std::span<const MultimodalSample> samples, std::span<const std::size_t> idx) {
    return stack(samples, idx, true);
}

Tensor stack_depth(std::span<const MultimodalSample> samples, std::span<const std::size_t> idx) {
    return stack(samples, idx, false);
}

void write_ppm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1)) {
        throw ShapeError("write_ppm: expected (3,H,W) or (1,H,W), got " + shape_str(image.shape()));
    }
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << "P6\n" << w << ' ' << h << "\n255\n";
    for (std::size_t i = 0; i < h * w; ++i) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const double v = image[(c == 3 ? ch : 0) * h * w + i];
            out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
        }
    }
    if (!out) throw Error("failed writing '" + path + "'");
}

}  // namespace jemb

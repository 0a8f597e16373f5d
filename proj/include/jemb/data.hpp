#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "jemb/rng.hpp"
#include "jemb/tensor.hpp"

namespace jemb {

enum class ShapeKind : std::uint32_t { rectangle = 0, disc = 1, triangle = 2 };

/// One object of a scene. Position and size are fractions of the image side;
/// depth is in meters.
struct ShapeParams {
    ShapeKind kind = ShapeKind::rectangle;
    double x = 0.5;
    double y = 0.5;
    double size = 0.1;
    double depth = 5.0;

    bool operator==(const ShapeParams&) const = default;
};

/// Ground-truth generative factors. Even appearance classes are daytime
/// palettes, odd ones are nighttime.
struct SceneFactors {
    int appearance_class = 0;
    int structure_class = 0;
    double view_angle = 0.0;    // radians, shifts the scene horizontally
    double illumination = 1.0;  // global brightness of the palette
    std::vector<ShapeParams> shapes;

    bool is_day() const { return appearance_class % 2 == 0; }
    bool operator==(const SceneFactors&) const = default;
};

/// A matched (rgb, depth) pair. rgb is (3,H,W) and depth is (1,H,W), both in [0,1].
struct MultimodalSample {
    Tensor rgb;
    Tensor depth;
    SceneFactors factors;
};

inline constexpr std::size_t kMaxShapes = 4;
/// Depth normalization constant: meters mapped to 1.0.
inline constexpr double kMaxRange = 12.0;

/// Draws factors and renders one scene. Requires palettes >= 2, layouts >= 2, size >= 16.
MultimodalSample generate_scene(Rng& rng, int palettes, int layouts, std::size_t size);

/// Draws factors only (no rendering).
SceneFactors sample_factors(Rng& rng, int palettes, int layouts);

/// Deterministic renderer. The depth image depends only on the geometry
/// (structure class, view angle, shapes).
MultimodalSample render_scene(const SceneFactors& factors, std::size_t size);

/// n samples, sample i drawn from Rng::derive(seed, i).
std::vector<MultimodalSample> generate_dataset(std::size_t n, int palettes, int layouts, std::size_t size,
                                               std::uint64_t seed);

struct Intrinsics {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
};

/// Points in the sensor frame (x right, y down, z forward), meters.
struct PointCloud {
    std::vector<std::array<double, 3>> points;
    Intrinsics intrinsics;
};

/// Pinhole camera matching the renderer: focal length equal to the image side,
/// principal point at the image center.
Intrinsics default_intrinsics(std::size_t size);

/// Sparse (size,size) depth image; 0 marks pixels without a return. Points
/// with z <= 0 or outside the frame are dropped; the nearest point wins.
Tensor project_pointcloud(const PointCloud& pc, std::size_t size);

/// Fills every zero pixel of a (H,W) image with the value of the nearest
/// nonzero pixel (Euclidean distance, ties to the first in row-major order).
/// Throws DomainError if every pixel is zero.
Tensor densify_depth(const Tensor& sparse);

/// MMD1 dataset file: "MMD1", u32 count, then per sample TSR1 rgb, TSR1 depth
/// and a fixed-width factor record.
void write_dataset(std::ostream& out, std::span<const MultimodalSample> samples);
std::vector<MultimodalSample> read_dataset(std::istream& in);
void save_dataset(const std::string& path, std::span<const MultimodalSample> samples);
std::vector<MultimodalSample> load_dataset(const std::string& path);

/// Pairs "<stem>_rgb.tsr" / "<stem>_depth.tsr" from a directory, sorted by
/// stem. Factor labels are set to -1.
std::vector<MultimodalSample> load_tsr_directory(const std::string& dir);

/// Seeded partition of sample indices by the given fractions (summing to 1),
/// stratified on appearance class so every partition keeps the class mix
/// within one sample of proportional.
std::vector<std::vector<std::size_t>> stratified_split(std::span<const MultimodalSample> samples,
                                                       std::span<const double> fractions, Rng& rng);

std::vector<MultimodalSample> select(std::span<const MultimodalSample> samples, std::span<const std::size_t> idx);

/// Stacks rgb (B,3,H,W) or depth (B,1,H,W) images for the given indices.
Tensor stack_rgb(std::span<const MultimodalSample> samples, std::span<const std::size_t> idx);
Tensor stack_depth(std::span<const MultimodalSample> samples, std::span<const std::size_t> idx);

/// Binary PPM of a (3,H,W) or (1,H,W) image with values in [0,1].
void write_ppm(const std::string& path, const Tensor& image);

}  // namespace jemb

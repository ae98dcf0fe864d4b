#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "multisiam/tensor.h"

namespace msiam {

enum class ShapeClass : std::uint8_t { kDisk = 1, kRectangle = 2, kTriangle = 3 };

/// Parameters of the synthetic multi-instance scene generator.
struct SceneSpec {
  std::size_t height = 64, width = 64;
  std::size_t min_instances = 2, max_instances = 5;
  /// Base RGB color per class (index = class id - 1).
  std::array<std::array<double, 3>, 3> palette = {{{0.85, 0.25, 0.20},
                                                   {0.20, 0.70, 0.30},
                                                   {0.25, 0.35, 0.90}}};
  double color_jitter = 0.08;
  /// Instance size relative to the shorter image side.
  double min_size = 0.12, max_size = 0.26;
  double max_overlap = 0.3;
  std::size_t placement_retries = 64;
  /// Value-noise lattice spacing in pixels and per-channel amplitude.
  double background_cell = 16.0;
  double background_base = 0.5, background_amplitude = 0.2;
  std::uint64_t seed = 0;
};

/// One generated image with ground truth. Masks are row-major H*W; instance
/// ids start at 1 (0 = background) and instance_class[id - 1] is the class.
struct LabeledImage {
  std::size_t height = 0, width = 0;
  Tensor image; // [3,H,W] in [0,1]
  std::vector<std::uint16_t> instance_mask;
  std::vector<std::uint8_t> class_mask;
  std::vector<std::uint8_t> instance_class;

  std::size_t instance_count() const { return instance_class.size(); }
};

/// Image `index` of the corpus defined by `spec` (independent of the others).
LabeledImage generate_image(const SceneSpec& spec, std::size_t index);
/// Images 0..n-1. Throws InvalidArgument when n == 0.
std::vector<LabeledImage> generate(const SceneSpec& spec, std::size_t n);

/// Pixel-center rasterizers: a pixel belongs to the shape iff its center
/// (x + 0.5, y + 0.5) lies inside. Return an H*W occupancy mask.
std::vector<bool> rasterize_disk(std::size_t h, std::size_t w, double cx,
                                 double cy, double r);
std::vector<bool> rasterize_rectangle(std::size_t h, std::size_t w, double x0,
                                      double y0, double x1, double y1);
std::vector<bool> rasterize_triangle(std::size_t h, std::size_t w,
                                     const std::array<double, 6>& xy);

/// Majority vote over S x S blocks; ties go to the lowest label.
/// Throws ShapeError when H or W is not divisible by S.
template <typename Label>
std::vector<Label> downsample_mask(const std::vector<Label>& mask,
                                   std::size_t h, std::size_t w,
                                   std::size_t stride);

void save_msim(const std::filesystem::path& path, const LabeledImage& image);
/// Throws FormatError on a bad magic or truncated file. instance_class is
/// rebuilt from the masks.
LabeledImage load_msim(const std::filesystem::path& path);

extern template std::vector<std::uint16_t> downsample_mask(
    const std::vector<std::uint16_t>&, std::size_t, std::size_t, std::size_t);
extern template std::vector<std::uint8_t> downsample_mask(
    const std::vector<std::uint8_t>&, std::size_t, std::size_t, std::size_t);
extern template std::vector<std::size_t> downsample_mask(
    const std::vector<std::size_t>&, std::size_t, std::size_t, std::size_t);

} // namespace msiam

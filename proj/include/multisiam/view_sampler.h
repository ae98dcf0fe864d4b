#pragma once

#include <cstddef>
#include <vector>

#include "multisiam/rng.h"
#include "multisiam/tensor.h"

namespace msiam {

/// Crop box in continuous source-image pixel coordinates.
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  bool valid() const { return x0 < x1 && y0 < y1; }
  bool operator==(const Box&) const = default;
};

struct PhotoParams {
  double brightness = 0, contrast = 0, saturation = 0, hue = 0;
  bool grayscale = false;
  double blur_sigma = 0; // 0 = off
  bool solarize = false;
  bool operator==(const PhotoParams&) const = default;
};

struct ViewSpec {
  Box box;
  bool flipped = false;
  PhotoParams photo;
  std::size_t out_h = 64, out_w = 64;
  bool operator==(const ViewSpec&) const = default;
};

struct ViewPair {
  ViewSpec a, b;
  double iou = 0;
};

/// Per-view photometric probabilities and magnitudes.
struct PhotoConfig {
  double jitter_prob = 0.8;
  double max_brightness = 0.4, max_contrast = 0.4, max_saturation = 0.2,
         max_hue = 0.1;
  double grayscale_prob = 0.2;
  double blur_prob = 1.0;
  double blur_sigma_min = 0.1, blur_sigma_max = 2.0; // at 224 px
  double solarize_prob = 0.0;
  double flip_prob = 0.5;
};

struct SamplerConfig {
  double iou_threshold = 0.5;
  double min_scale = 0.08;
  double max_scale = 1.0;
  double min_aspect = 3.0 / 4.0, max_aspect = 4.0 / 3.0;
  std::size_t max_attempts = 100;
  std::size_t out_h = 64, out_w = 64;
  PhotoConfig photo_a{};
  PhotoConfig photo_b = [] {
    PhotoConfig c;
    c.blur_prob = 0.1;
    c.solarize_prob = 0.2;
    return c;
  }();
};

double compute_iou(const Box& a, const Box& b);

/// Random-resized-crop box: area fraction uniform in [min_scale, max_scale],
/// aspect ratio log-uniform in the configured range.
Box sample_crop_box(std::size_t image_h, std::size_t image_w,
                    const SamplerConfig& config, Rng& rng);

PhotoParams sample_photo_params(const PhotoConfig& config, std::size_t out_w,
                                Rng& rng);

/// Draws box pairs until IoU >= threshold (both boxes redrawn per attempt).
/// After max_attempts misses the best pair seen is returned. Flip and
/// photometric parameters are drawn once, after the geometry is fixed.
ViewPair sample_view_pair(std::size_t image_h, std::size_t image_w,
                          const SamplerConfig& config, Rng& rng);

/// Crop-resize (bilinear, pixel-center convention), optional horizontal flip,
/// then jitter -> grayscale -> blur -> solarize. Output clamped to [0,1].
Tensor render_view(const Tensor& image, const ViewSpec& spec);

/// Bilinear crop-resize only (no flip, no photometrics).
Tensor crop_resize(const Tensor& image, const Box& box, std::size_t out_h,
                   std::size_t out_w);

/// Photometric chain applied to a [3,H,W] image in fixed order.
Tensor apply_photometric(const Tensor& image, const PhotoParams& params);

} // namespace msiam

#pragma once

#include <cstdint>
#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "multisiam/corpus.h"
#include "multisiam/network.h"
#include "multisiam/objective.h"

namespace msiam {

/// Adjusted Rand index of two labelings of the same items. Returns 1 when
/// both labelings are trivially identical (a single cluster each, or all
/// singletons each).
double adjusted_rand_index(std::span<const std::size_t> a,
                           std::span<const std::size_t> b);

struct ProbeReport {
  double ari_instance = 0;
  double ari_class = 0;
  double feature_std = 0;
  /// Per image: cluster label per feature-map cell, row-major.
  std::vector<std::vector<std::size_t>> cluster_maps;
  std::size_t map_height = 0, map_width = 0;
};

struct ProbeOptions {
  std::size_t k = 3;
  KMeansMetric metric = KMeansMetric::kCosine;
  std::size_t max_iter = 10;
  std::uint64_t seed = 0;
};

/// Clusters precomputed per-image feature maps [C,h,w] and scores them
/// against the images' masks downsampled to h x w. feature_std is left 0.
ProbeReport probe_features(const std::vector<Tensor>& features,
                           const std::vector<LabeledImage>& images,
                           const ProbeOptions& options);

/// Frozen-backbone probe: backbone maps of the unaugmented images, then
/// probe_features. feature_std is taken over the 1D projections.
ProbeReport probe_backbone(const Network& net,
                           const std::vector<LabeledImage>& images,
                           const ProbeOptions& options);

/// Backbone features bilinearly upsampled to image resolution, clustered
/// per pixel. Returns H*W labels.
std::vector<std::size_t> cluster_full_resolution(const Network& net,
                                                 const LabeledImage& image,
                                                 const ProbeOptions& options,
                                                 std::size_t image_index);

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels; // RGB interleaved, row-major
};

/// Fixed 8-color palette; label l maps to entry l % 8.
std::array<std::uint8_t, 3> palette_color(std::size_t label);

/// Panels left to right: input image, then one color-coded panel per label
/// map (each H*W).
RgbImage compose_panels(const LabeledImage& image,
                        const std::vector<std::vector<std::size_t>>& label_maps);

void write_ppm(const std::filesystem::path& path, const RgbImage& image);
/// Reads binary P6 with maxval 255. Throws FormatError otherwise.
RgbImage read_ppm(const std::filesystem::path& path);

} // namespace msiam

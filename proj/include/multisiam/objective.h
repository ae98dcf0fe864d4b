#pragma once

#include <cstdint>
#include <vector>

#include "multisiam/alignment.h"
#include "multisiam/network.h"
#include "multisiam/rng.h"
#include "multisiam/tensor.h"

namespace msiam {

enum class KMeansMetric { kCosine, kEuclidean };

struct ClusterResult {
  Tensor centroids;                  // [K,C]
  std::vector<std::size_t> assignments; // H*W, row-major
  Tensor centroid_map;               // [C,H,W]
  double cost = 0;                   // sum of squared distances
  std::vector<double> cost_history;  // after every half-step of Lloyd
  std::size_t iterations = 0;
  std::size_t height = 0, width = 0;
};

/// Lloyd's algorithm on the pixels of a [C,H,W] map from explicit initial
/// centroids [K,C]. With the cosine metric pixels are unit-normalized and
/// centroids are re-normalized after each update (spherical K-means).
/// Empty clusters take over the point farthest from its centroid. Stops when
/// assignments repeat or after max_iter iterations. All outputs are detached.
ClusterResult kmeans_from_init(const Tensor& map, const Tensor& init_centroids,
                               KMeansMetric metric, std::size_t max_iter);

/// k-means++ seeding followed by kmeans_from_init. Throws InvalidArgument
/// when K exceeds the pixel count.
ClusterResult kmeans(const Tensor& map, std::size_t k, KMeansMetric metric,
                     std::size_t max_iter, Rng& rng);

/// k-means++ seeds [K,C] over pixel rows (already metric-normalized).
Tensor kmeans_plus_plus(const std::vector<std::vector<double>>& points,
                        std::size_t k, Rng& rng);

/// -cos(q, z'); z' is treated as a constant target.
Tensor loss_1d(const Tensor& prediction, const Tensor& target);

/// Mean over pixels of -cos(Q_ij, centroid_ij). With `dense`, each pixel
/// instead averages -cos against every target pixel in its cluster.
Tensor loss_2d_cluster(const Tensor& prediction, const ClusterResult& clusters,
                       bool dense, const Tensor& target_map);

/// Mean over pixels of -cos(Q_ij, R'_ij).
Tensor loss_2d_wo_kmeans(const Tensor& prediction, const Tensor& target_map);

/// lambda * l1d + (1 - lambda) * l2d.
Tensor loss_total(const Tensor& l1d, const Tensor& l2d, double lambda);

/// Fixed-capacity FIFO of unit-normalized feature vectors.
class NegativeQueue {
 public:
  NegativeQueue(std::size_t capacity, std::size_t dim);

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return size_; }
  std::size_t cursor() const { return cursor_; }

  /// Normalizes and inserts, evicting the oldest entries when full.
  void push(std::span<const double> feature);
  /// Current entries as a detached [size, dim] tensor (oldest first is not
  /// guaranteed; order is storage order).
  Tensor entries() const;

  /// Raw storage access for checkpointing.
  const std::vector<double>& storage() const { return data_; }
  void restore(std::vector<double> storage, std::size_t size,
               std::size_t cursor);

 private:
  std::size_t capacity_, dim_;
  std::size_t size_ = 0, cursor_ = 0;
  std::vector<double> data_;
};

/// Per-pixel InfoNCE: positives [C,H,W] (constant), online [C,H,W], and
/// negatives [L,C] (constant, may have L = 0). Both online and positive
/// vectors are unit-normalized before the dot products.
Tensor pixel_infonce(const Tensor& online, const Tensor& positives,
                     const Tensor& negatives, double temperature);

struct MocoOutput {
  Tensor loss;
  /// Unit-normalized target pixel projections [HW, C] to enqueue after the
  /// step.
  Tensor target_pixels;
};

/// MoCo-style variant: RoI-align the raw backbone maps, project (online
/// projector wrapped in self-attention), cluster the target projection and
/// score each online pixel against its target centroid (positive) and the
/// queue (negatives). Feature maps must already be flip-backed.
MocoOutput moco_pixel_infonce(const Network& online, const Network& target,
                              const Tensor& online_features,
                              const Tensor& target_features,
                              const ViewSpec& spec_a, const ViewSpec& spec_b,
                              const NegativeQueue& queue, std::size_t k,
                              KMeansMetric metric, std::size_t max_iter,
                              double temperature, bool residual, Rng& rng);

} // namespace msiam

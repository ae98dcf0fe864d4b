#include "multisiam/objective.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "multisiam/ops.h"

namespace msiam {

namespace {

using Points = std::vector<std::vector<double>>;

void normalize_row(std::vector<double>& v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double n = std::max(std::sqrt(ss), 1e-12);
  for (double& x : v) x /= n;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

Points pixels_of(const Tensor& map, KMeansMetric metric) {
  const std::size_t c = map.dim(0), n = map.dim(1) * map.dim(2);
  auto x = map.data();
  Points pts(n, std::vector<double>(c));
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t ch = 0; ch < c; ++ch) pts[p][ch] = x[ch * n + p];
    if (metric == KMeansMetric::kCosine) normalize_row(pts[p]);
  }
  return pts;
}

void check_map(const Tensor& map, const char* who) {
  if (map.rank() != 3 || map.numel() == 0) {
    throw ShapeError(std::string(who) + ": expected non-empty [C,H,W], got " +
                     shape_string(map.shape()));
  }
}

// Tolerance for floating-point noise in the monotone-cost assertion.
bool increased(double now, double before) {
  return now > before + 1e-9 * std::max(1.0, std::abs(before));
}

} // namespace

Tensor kmeans_plus_plus(const Points& points, std::size_t k, Rng& rng) {
  const std::size_t n = points.size();
  if (k == 0 || k > n) {
    throw InvalidArgument("kmeans: K must be in [1, H*W], got K=" +
                          std::to_string(k) + " for " + std::to_string(n) +
                          " pixels");
  }
  const std::size_t c = points[0].size();
  std::vector<std::size_t> chosen{static_cast<std::size_t>(rng.below(n))};
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  while (chosen.size() < k) {
    double total = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      d2[p] = std::min(d2[p], sq_dist(points[p], points[chosen.back()]));
      total += d2[p];
    }
    std::size_t pick = n - 1;
    if (total <= 0.0) {
      pick = static_cast<std::size_t>(rng.below(n));
    } else {
      double r = rng.uniform() * total;
      for (std::size_t p = 0; p < n; ++p) {
        r -= d2[p];
        if (r < 0.0) {
          pick = p;
          break;
        }
      }
    }
    chosen.push_back(pick);
  }
  std::vector<double> out;
  out.reserve(k * c);
  for (auto idx : chosen) {
    out.insert(out.end(), points[idx].begin(), points[idx].end());
  }
  return Tensor::from({k, c}, std::move(out));
}

ClusterResult kmeans_from_init(const Tensor& map, const Tensor& init_centroids,
                               KMeansMetric metric, std::size_t max_iter) {
  check_map(map, "kmeans");
  const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2),
                    n = h * w;
  if (init_centroids.rank() != 2 || init_centroids.dim(1) != c ||
      init_centroids.dim(0) == 0) {
    throw ShapeError("kmeans: initial centroids " +
                     shape_string(init_centroids.shape()) +
                     " incompatible with map " + shape_string(map.shape()));
  }
  const std::size_t k = init_centroids.dim(0);
  if (k > n) {
    throw InvalidArgument("kmeans: K=" + std::to_string(k) + " exceeds " +
                          std::to_string(n) + " pixels");
  }
  if (max_iter == 0) {
    throw InvalidArgument("kmeans: max_iter must be >= 1");
  }
  const Points pts = pixels_of(map, metric);
  Points cent(k, std::vector<double>(c));
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t ch = 0; ch < c; ++ch)
      cent[j][ch] = init_centroids.data()[j * c + ch];
    if (metric == KMeansMetric::kCosine) normalize_row(cent[j]);
  }

  ClusterResult res;
  res.height = h;
  res.width = w;
  std::vector<std::size_t> assign(n, k); // k = "unassigned"
  auto record = [&res](double cost) {
    if (!res.cost_history.empty() && increased(cost, res.cost_history.back())) {
      throw NumericError("kmeans: Lloyd cost increased from " +
                         std::to_string(res.cost_history.back()) + " to " +
                         std::to_string(cost));
    }
    res.cost_history.push_back(cost);
  };
  auto total_cost = [&]() {
    double s = 0.0;
    for (std::size_t p = 0; p < n; ++p) s += sq_dist(pts[p], cent[assign[p]]);
    return s;
  };

  for (std::size_t it = 0; it < max_iter; ++it) {
    // Assignment step; ties go to the lowest centroid index.
    bool changed = false;
    for (std::size_t p = 0; p < n; ++p) {
      std::size_t best = 0;
      double best_d = sq_dist(pts[p], cent[0]);
      for (std::size_t j = 1; j < k; ++j) {
        const double d = sq_dist(pts[p], cent[j]);
        if (d < best_d) {
          best_d = d;
          best = j;
        }
      }
      changed = changed || best != assign[p];
      assign[p] = best;
    }
    record(total_cost());
    res.iterations = it + 1;
    if (!changed) {
      break;
    }

    // Empty-cluster repair: hand the worst-fit point (from a cluster that
    // keeps at least one member) to the empty cluster.
    std::vector<std::size_t> counts(k, 0);
    for (auto a : assign) ++counts[a];
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] != 0) continue;
      std::size_t worst = n;
      double worst_d = -1.0;
      for (std::size_t p = 0; p < n; ++p) {
        if (counts[assign[p]] < 2) continue;
        const double d = sq_dist(pts[p], cent[assign[p]]);
        if (d > worst_d) {
          worst_d = d;
          worst = p;
        }
      }
      --counts[assign[worst]];
      assign[worst] = j;
      counts[j] = 1;
      cent[j] = pts[worst];
    }

    // Update step.
    Points next(k, std::vector<double>(c, 0.0));
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) next[assign[p]][ch] += pts[p][ch];
    for (std::size_t j = 0; j < k; ++j) {
      for (double& v : next[j]) v /= static_cast<double>(counts[j]);
      if (metric == KMeansMetric::kCosine) {
        double ss = 0.0;
        for (double v : next[j]) ss += v * v;
        if (ss <= 1e-24) {
          continue; // antipodal members; keep the previous centroid
        }
        normalize_row(next[j]);
      }
      cent[j] = std::move(next[j]);
    }
    record(total_cost());
  }

  res.cost = res.cost_history.back();
  res.assignments = assign;
  std::vector<double> cflat;
  cflat.reserve(k * c);
  for (const auto& row : cent) cflat.insert(cflat.end(), row.begin(), row.end());
  std::vector<double> cmap(c * n);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t ch = 0; ch < c; ++ch) cmap[ch * n + p] = cent[assign[p]][ch];
  res.centroids = Tensor::from({k, c}, std::move(cflat));
  res.centroid_map = Tensor::from({c, h, w}, std::move(cmap));
  return res;
}

ClusterResult kmeans(const Tensor& map, std::size_t k, KMeansMetric metric,
                     std::size_t max_iter, Rng& rng) {
  check_map(map, "kmeans");
  const std::size_t n = map.dim(1) * map.dim(2);
  if (k == 0 || k > n) {
    throw InvalidArgument("kmeans: K=" + std::to_string(k) +
                          " must be in [1, " + std::to_string(n) + "]");
  }
  const Points pts = pixels_of(map, metric);
  return kmeans_from_init(map, kmeans_plus_plus(pts, k, rng), metric,
                          max_iter);
}

namespace {

// Per-pixel <unit(Q), T> over channels, [H,W]. T is used as given.
Tensor pixel_dot_unit(const Tensor& prediction, const Tensor& target) {
  return sum_axis(mul(l2_normalize(prediction, 0), target), 0);
}

void check_same_extent(const Tensor& a, const Tensor& b, const char* who) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) ||
      a.dim(2) != b.dim(2)) {
    throw ShapeError(std::string(who) + ": extents differ: " +
                     shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

} // namespace

Tensor loss_1d(const Tensor& prediction, const Tensor& target) {
  return negate(cosine_similarity(prediction, target.detach()));
}

Tensor loss_2d_cluster(const Tensor& prediction, const ClusterResult& clusters,
                       bool dense, const Tensor& target_map) {
  check_same_extent(prediction, clusters.centroid_map, "loss_2d_cluster");
  if (prediction.dim(0) != clusters.centroid_map.dim(0)) {
    throw ShapeError("loss_2d_cluster: channel mismatch " +
                     shape_string(prediction.shape()) + " vs " +
                     shape_string(clusters.centroid_map.shape()));
  }
  if (!dense) {
    const Tensor target = l2_normalize(clusters.centroid_map.detach(), 0);
    return negate(mean(pixel_dot_unit(prediction, target)));
  }
  check_same_extent(prediction, target_map, "loss_2d_cluster");
  // mean_{p' in cluster} -cos(Q_p, R'_p') = -<unit(Q_p), mean unit(R'_p')>
  const std::size_t c = target_map.dim(0);
  const std::size_t n = target_map.dim(1) * target_map.dim(2);
  const std::size_t k = clusters.centroids.dim(0);
  Tensor unit;
  {
    NoGradGuard guard;
    unit = l2_normalize(target_map.detach(), 0);
  }
  auto u = unit.data();
  std::vector<double> means(k * c, 0.0);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t a = clusters.assignments[p];
    ++counts[a];
    for (std::size_t ch = 0; ch < c; ++ch) means[a * c + ch] += u[ch * n + p];
  }
  std::vector<double> field(c * n);
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t a = clusters.assignments[p];
    for (std::size_t ch = 0; ch < c; ++ch)
      field[ch * n + p] = means[a * c + ch] / static_cast<double>(counts[a]);
  }
  const Tensor target = Tensor::from(target_map.shape(), std::move(field));
  return negate(mean(pixel_dot_unit(prediction, target)));
}

Tensor loss_2d_wo_kmeans(const Tensor& prediction, const Tensor& target_map) {
  check_same_extent(prediction, target_map, "loss_2d_wo_kmeans");
  Tensor target;
  {
    NoGradGuard guard;
    target = l2_normalize(target_map.detach(), 0);
  }
  return negate(mean(pixel_dot_unit(prediction, target)));
}

Tensor loss_total(const Tensor& l1d, const Tensor& l2d, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw InvalidArgument("loss_total: lambda must be in [0,1]");
  }
  return add(scale(l1d, lambda), scale(l2d, 1.0 - lambda));
}

NegativeQueue::NegativeQueue(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim), data_(capacity * dim, 0.0) {
  if (dim == 0) {
    throw InvalidArgument("NegativeQueue: dim must be positive");
  }
}

void NegativeQueue::push(std::span<const double> feature) {
  if (feature.size() != dim_) {
    throw ShapeError("NegativeQueue::push: expected dim " +
                     std::to_string(dim_) + ", got " +
                     std::to_string(feature.size()));
  }
  if (capacity_ == 0) {
    return;
  }
  std::vector<double> v(feature.begin(), feature.end());
  normalize_row(v);
  std::copy(v.begin(), v.end(), data_.begin() + cursor_ * dim_);
  cursor_ = (cursor_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
}

Tensor NegativeQueue::entries() const {
  return Tensor::from({size_, dim_},
                      std::vector<double>(data_.begin(),
                                          data_.begin() + size_ * dim_));
}

void NegativeQueue::restore(std::vector<double> storage, std::size_t size,
                            std::size_t cursor) {
  if (storage.size() != capacity_ * dim_ || size > capacity_ ||
      (capacity_ > 0 && cursor >= capacity_)) {
    throw FormatError("NegativeQueue::restore: inconsistent queue state");
  }
  data_ = std::move(storage);
  size_ = size;
  cursor_ = cursor;
}

Tensor pixel_infonce(const Tensor& online, const Tensor& positives,
                     const Tensor& negatives, double temperature) {
  check_same_extent(online, positives, "pixel_infonce");
  if (!(temperature > 0.0)) {
    throw InvalidArgument("pixel_infonce: temperature must be positive");
  }
  const std::size_t c = online.dim(0);
  const std::size_t n = online.dim(1) * online.dim(2);
  if (positives.dim(0) != c || negatives.rank() != 2 ||
      (negatives.dim(0) > 0 && negatives.dim(1) != c)) {
    throw ShapeError("pixel_infonce: channel mismatch");
  }
  const Tensor q = l2_normalize(reshape(online, {c, n}), 0); // [C,N]
  Tensor k_pos;
  {
    NoGradGuard guard;
    k_pos = l2_normalize(reshape(positives.detach(), {c, n}), 0);
  }
  const Tensor pos = scale(sum_axis(mul(q, k_pos), 0), 1.0 / temperature);
  Tensor logits = reshape(pos, {n, 1});
  if (negatives.dim(0) > 0) {
    const Tensor neg = scale(matmul(transpose(q), transpose(negatives.detach())),
                             1.0 / temperature);
    logits = concat({logits, neg}, 1);
  }
  return mean(sub(logsumexp_rows(logits), pos));
}

MocoOutput moco_pixel_infonce(const Network& online, const Network& target,
                              const Tensor& online_features,
                              const Tensor& target_features,
                              const ViewSpec& spec_a, const ViewSpec& spec_b,
                              const NegativeQueue& queue, std::size_t k,
                              KMeansMetric metric, std::size_t max_iter,
                              double temperature, bool residual, Rng& rng) {
  const std::size_t h = online_features.dim(1), w = online_features.dim(2);
  const auto [ra, rb] = intersection_relative(spec_a, spec_b);
  const Tensor r_online = roi_align(online_features, ra, h, w);
  const Tensor g_online =
      self_attention_predict(r_online, online.project_2d(r_online), residual);

  MocoOutput out;
  Tensor g_target;
  {
    NoGradGuard guard;
    g_target = target.project_2d(roi_align(target_features.detach(), rb, h, w));
    const std::size_t c = g_target.dim(0);
    out.target_pixels = transpose(l2_normalize(reshape(g_target, {c, h * w}), 0));
  }
  const ClusterResult clusters = kmeans(g_target, k, metric, max_iter, rng);
  out.loss = pixel_infonce(g_online, clusters.centroid_map, queue.entries(),
                           temperature);
  return out;
}

} // namespace msiam

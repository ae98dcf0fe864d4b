#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "multisiam/alignment.h"
#include "multisiam/objective.h"

namespace msiam {

enum class OptimizerKind { kSgd, kLars };
enum class LossMode { kCluster, kWoKmeans, kMoco };

/// Every tunable of a run. Defaults are the desk-scale configuration.
struct TrainConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 8;
  std::size_t accumulation_steps = 1;
  double lr_base = 1.0;
  double weight_decay = 1e-5;
  double momentum = 0.9;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double lars_trust = 0.001;
  double lars_eps = 1e-9;
  /// Gradients of both predictors are multiplied by this before the
  /// optimizer step.
  double predictor_lr_scale = 100.0;

  double lambda = 0.5;
  LossMode loss_mode = LossMode::kCluster;
  AlignMode alignment = AlignMode::kOffset;
  bool normalize_offset = true;
  bool self_attention = true;
  /// Defaults to on for roi alignment and off otherwise unless set.
  bool residual = false;
  bool dense = false;
  /// Per-channel spatial standardization inside the 2D heads.
  bool head_norm = true;
  std::size_t k = 3;
  KMeansMetric kmeans_metric = KMeansMetric::kCosine;
  std::size_t kmeans_max_iter = 10;
  double temperature = 0.2;
  std::size_t queue_size = 1024;

  double iou_threshold = 0.5;
  double min_scale = 0.08;
  double tau_base = 0.996;
  bool symmetrize = true;
  std::uint64_t seed = 0;

  std::size_t image_size = 64;
  std::size_t view_size = 64;
  std::size_t corpus_size = 256;
  std::size_t eval_size = 64;
  std::size_t min_instances = 2;
  std::size_t max_instances = 5;

  /// Canonical key=value text of every key, one per line.
  std::string to_text() const;
};

/// Parses key=value lines ('#' starts a comment), then applies `overrides`
/// in order. Unknown keys, malformed values and out-of-range values throw
/// InvalidArgument naming the key.
TrainConfig parse_config(const std::string& text,
                         const std::vector<std::pair<std::string, std::string>>&
                             overrides = {});

std::vector<std::string> config_keys();

std::string to_string(OptimizerKind v);
std::string to_string(LossMode v);
std::string to_string(AlignMode v);
std::string to_string(KMeansMetric v);

} // namespace msiam

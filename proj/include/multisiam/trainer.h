#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "multisiam/config.h"
#include "multisiam/corpus.h"
#include "multisiam/network.h"
#include "multisiam/objective.h"

namespace msiam {

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0, l1d = 0, l2d = 0, tau = 0, lr = 0, feature_std = 0;
};

/// Parameters, optimizer state and queue of a run. `step` counts completed
/// iterations.
struct TrainState {
  TrainConfig config;
  SiamesePair pair;
  /// Momentum buffers, parallel to pair.online.named_parameters().
  std::vector<std::vector<double>> velocity;
  NegativeQueue queue{0, 1};
  std::size_t step = 0;
};

/// Architecture implied by a run config (predictor input widens by two
/// channels in offset mode).
NetworkConfig network_config(const TrainConfig& config);

/// Fresh state; parameter init draws from the config seed.
TrainState init_state(const TrainConfig& config);

/// lr_base * batch_size / 256 * (cos(pi * step / steps) + 1) / 2.
double effective_lr(std::size_t step, const TrainConfig& config);

/// v <- m v + (g + wd w); w <- w - lr v. Parameters without a grad buffer
/// count as zero gradient.
void sgd_step(const std::vector<Tensor>& params,
              std::vector<std::vector<double>>& velocity, double lr,
              double momentum, double weight_decay);

/// Layer-wise trust ratio trust * ||w|| / (||g + wd w|| + eps) scales the
/// step of each tensor with ||w|| > 0 and ||g + wd w|| > 0. 1-d tensors
/// (biases) use ratio 1 and skip weight decay.
void lars_step(const std::vector<Tensor>& params,
               std::vector<std::vector<double>>& velocity, double lr,
               double momentum, double weight_decay, double trust, double eps);

/// Loss pieces of one image for one view ordering (or both when
/// symmetrized).
struct ImageLoss {
  Tensor loss;
  double l1d = 0, l2d = 0;
  /// Online 1D projection of the first view (detached), for feature_std.
  std::vector<double> embedding;
  /// Unit target pixel projections to enqueue (moco mode only).
  std::vector<Tensor> enqueue;
};

/// Forward pass of one source image: samples a view pair from `sample_rng`,
/// renders both views and evaluates the configured objective. `kmeans_rng`
/// seeds the clustering.
ImageLoss image_loss(const TrainState& state, const Tensor& image,
                     Rng& sample_rng, Rng& kmeans_rng);

/// Loss of a fixed view pair.
ImageLoss pair_loss(const TrainState& state, const Tensor& image,
                    const ViewPair& pair, Rng& kmeans_rng);

/// sqrt of the summed per-dimension batch variance of unit-normalized rows;
/// 0 when all rows coincide, at most 1.
double feature_std(const std::vector<std::vector<double>>& embeddings);

/// Corpus indices of the images used at `step`.
std::vector<std::size_t> batch_indices(const TrainConfig& config,
                                       std::size_t step,
                                       std::size_t corpus_size);

/// Forward and backward over `images` with every loss scaled by
/// `grad_scale`. Gradients accumulate into the online parameters. Returns
/// batch-mean metrics (lr and tau unset). Throws NumericError with a
/// diagnostic dump on a non-finite loss.
StepMetrics accumulate_gradients(TrainState& state,
                                 const std::vector<Tensor>& images,
                                 std::size_t step, double grad_scale,
                                 std::vector<Tensor>* enqueue = nullptr);

/// One iteration on the corpus: forward/backward on the step's batch, then
/// at an accumulation boundary the optimizer step, zeroed grads and the EMA
/// update. Queue pushes happen after the iteration.
StepMetrics train_step(TrainState& state, const std::vector<LabeledImage>& corpus);

/// Runs until state.step == config.steps, calling `on_step` after each.
void train(TrainState& state, const std::vector<LabeledImage>& corpus,
           const std::function<void(const StepMetrics&)>& on_step = {});

/// Training corpus and held-out corpus of a config.
SceneSpec scene_spec(const TrainConfig& config, bool held_out);

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
/// Throws FormatError on magic/version mismatch, truncation or missing
/// tensors; never returns a partially filled state.
TrainState load_checkpoint(const std::filesystem::path& path);

/// Mean of the first and last `window` values; window = max(10, n / 10)
/// capped at n / 2.
std::pair<double, double> smoothed_endpoints(const std::vector<double>& values);

} // namespace msiam

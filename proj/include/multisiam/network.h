#pragma once

#include <string>
#include <utility>
#include <vector>

#include "multisiam/ops.h"
#include "multisiam/rng.h"
#include "multisiam/tensor.h"

namespace msiam {

struct BackboneStage {
  std::size_t channels;
  std::size_t stride;
};

/// Architecture of one branch. The desk default is four 3x3 conv stages
/// (16/32/32/32 channels, total stride 8) with relu and no normalization,
/// followed by separate 1D and 2D heads.
struct NetworkConfig {
  std::size_t in_channels = 3;
  /// Inputs are mapped to (x - input_mean) / input_std before stage 0.
  double input_mean = 0.5;
  double input_std = 0.25;
  /// Border handling of every backbone conv.
  PadMode padding = PadMode::kReplicate;
  std::vector<BackboneStage> stages = {{16, 2}, {32, 2}, {32, 2}, {32, 1}};
  std::size_t proj2d_hidden = 64;
  std::size_t proj2d_out = 32;
  std::size_t pred2d_hidden = 64;
  /// Extra predictor input channels (2 when the offset map is appended).
  std::size_t pred2d_extra_in = 2;
  std::size_t proj1d_hidden = 128;
  std::size_t proj1d_out = 64;
  std::size_t pred1d_hidden = 128;
  /// Standardize each hidden channel over space in the 2D heads. Per sample,
  /// so batch composition never matters.
  bool head_norm = true;

  std::size_t feature_channels() const { return stages.back().channels; }
  std::size_t total_stride() const;
};

/// Two 1x1 conv layers with relu between them (the MLP of a head).
struct PointwiseMlp {
  Tensor w1, b1, w2, b2;
};

struct ConvLayer {
  Tensor weight, bias;
  std::size_t stride = 1;
};

class Network {
 public:
  Network() = default;

  /// He-normal weights, zero biases. Parameters require grad.
  static Network initialize(const NetworkConfig& config, Rng& rng);

  const NetworkConfig& config() const { return config_; }

  /// Every parameter tensor with a stable name (shares storage).
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;

  /// Deep copy. The copy's parameters require grad iff `trainable`.
  Network clone(bool trainable) const;

  /// [3,H,W] -> [C,H/S,W/S]. Throws ShapeError if H or W is not divisible
  /// by the total stride.
  Tensor backbone(const Tensor& view) const;
  /// 2D projector g(F), spatial extent preserved.
  Tensor project_2d(const Tensor& features) const;
  /// Local 2D predictor q(R); R has proj2d_out (+ pred2d_extra_in) channels.
  Tensor predict_local(const Tensor& aligned) const;
  /// Pool -> 1D projector.
  Tensor project_1d(const Tensor& features) const;
  /// 1D predictor applied to a projection.
  Tensor predict_1d(const Tensor& projection) const;
  /// Online 1D path: predictor(projector(pool(F))).
  Tensor project_predict_1d(const Tensor& features) const;

  std::vector<ConvLayer>& stages() { return stages_; }
  const std::vector<ConvLayer>& stages() const { return stages_; }

 private:
  NetworkConfig config_;
  std::vector<ConvLayer> stages_;
  PointwiseMlp proj2d_, pred2d_, proj1d_, pred1d_;
};

/// Online network (trainable) plus its EMA target (never receives grads).
struct SiamesePair {
  Network online;
  Network target;

  static SiamesePair create(const NetworkConfig& config, Rng& rng);
};

/// target <- tau * target + (1 - tau) * online, for every parameter.
void ema_update(SiamesePair& pair, double tau);

/// Cosine ramp from tau_base at step 0 to 1 at total_steps.
double momentum_schedule(std::size_t step, std::size_t total_steps,
                         double tau_base);

/// Q_ij = sum_{i'j'} max(cos(R_ij, R_i'j'), 0)^2 * local_pred_i'j'
/// (unnormalized); with `residual`, Q += local_pred.
Tensor self_attention_predict(const Tensor& aligned, const Tensor& local_pred,
                              bool residual);

} // namespace msiam

#include "multisiam/network.h"

#include <cmath>
#include <numbers>

#include "multisiam/ops.h"

namespace msiam {

std::size_t NetworkConfig::total_stride() const {
  std::size_t s = 1;
  for (const auto& st : stages) s *= st.stride;
  return s;
}

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = std * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), true);
}

PointwiseMlp make_mlp(std::size_t in, std::size_t hidden, std::size_t out,
                      Rng& rng) {
  return {he_normal({hidden, in, 1, 1}, in, rng),
          Tensor::zeros({hidden}, true),
          he_normal({out, hidden, 1, 1}, hidden, rng),
          Tensor::zeros({out}, true)};
}

Tensor apply_mlp(const PointwiseMlp& mlp, const Tensor& x, bool spatial_norm) {
  if (x.rank() != 3 || x.dim(0) != mlp.w1.dim(1)) {
    throw ShapeError("head: expected " + std::to_string(mlp.w1.dim(1)) +
                     " input channels, got " + shape_string(x.shape()));
  }
  Tensor h = conv2d(x, mlp.w1, mlp.b1, 1, 0);
  if (spatial_norm && h.dim(1) * h.dim(2) > 1) {
    const Shape sh = h.shape();
    h = reshape(standardize(reshape(h, {sh[0], sh[1] * sh[2]}), 1), sh);
  }
  return conv2d(relu(h), mlp.w2, mlp.b2, 1, 0);
}

PointwiseMlp clone_mlp(const PointwiseMlp& m, bool trainable) {
  auto c = [trainable](const Tensor& t) {
    Tensor out = t.clone();
    out.set_requires_grad(trainable);
    return out;
  };
  return {c(m.w1), c(m.b1), c(m.w2), c(m.b2)};
}

void append_mlp(std::vector<std::pair<std::string, Tensor>>& out,
                const std::string& prefix, const PointwiseMlp& m) {
  out.emplace_back(prefix + ".fc1.weight", m.w1);
  out.emplace_back(prefix + ".fc1.bias", m.b1);
  out.emplace_back(prefix + ".fc2.weight", m.w2);
  out.emplace_back(prefix + ".fc2.bias", m.b2);
}

} // namespace

Network Network::initialize(const NetworkConfig& config, Rng& rng) {
  if (config.stages.empty()) {
    throw InvalidArgument("NetworkConfig: backbone needs at least one stage");
  }
  Network net;
  net.config_ = config;
  std::size_t in = config.in_channels;
  for (const auto& st : config.stages) {
    ConvLayer layer;
    layer.weight = he_normal({st.channels, in, 3, 3}, in * 9, rng);
    layer.bias = Tensor::zeros({st.channels}, true);
    layer.stride = st.stride;
    net.stages_.push_back(std::move(layer));
    in = st.channels;
  }
  const std::size_t c = config.feature_channels();
  net.proj2d_ = make_mlp(c, config.proj2d_hidden, config.proj2d_out, rng);
  net.pred2d_ = make_mlp(config.proj2d_out + config.pred2d_extra_in,
                         config.pred2d_hidden, config.proj2d_out, rng);
  net.proj1d_ = make_mlp(c, config.proj1d_hidden, config.proj1d_out, rng);
  net.pred1d_ = make_mlp(config.proj1d_out, config.pred1d_hidden,
                         config.proj1d_out, rng);
  return net;
}

std::vector<std::pair<std::string, Tensor>> Network::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string p = "backbone.stage" + std::to_string(i);
    out.emplace_back(p + ".weight", stages_[i].weight);
    out.emplace_back(p + ".bias", stages_[i].bias);
  }
  append_mlp(out, "projector2d", proj2d_);
  append_mlp(out, "predictor2d", pred2d_);
  append_mlp(out, "projector1d", proj1d_);
  append_mlp(out, "predictor1d", pred1d_);
  return out;
}

Network Network::clone(bool trainable) const {
  Network net;
  net.config_ = config_;
  for (const auto& st : stages_) {
    ConvLayer layer;
    layer.weight = st.weight.clone();
    layer.bias = st.bias.clone();
    layer.weight.set_requires_grad(trainable);
    layer.bias.set_requires_grad(trainable);
    layer.stride = st.stride;
    net.stages_.push_back(std::move(layer));
  }
  net.proj2d_ = clone_mlp(proj2d_, trainable);
  net.pred2d_ = clone_mlp(pred2d_, trainable);
  net.proj1d_ = clone_mlp(proj1d_, trainable);
  net.pred1d_ = clone_mlp(pred1d_, trainable);
  return net;
}

Tensor Network::backbone(const Tensor& view) const {
  if (view.rank() != 3 || view.dim(0) != config_.in_channels) {
    throw ShapeError("backbone: expected [" +
                     std::to_string(config_.in_channels) + ",H,W], got " +
                     shape_string(view.shape()));
  }
  const std::size_t s = config_.total_stride();
  if (view.dim(1) % s != 0 || view.dim(2) % s != 0) {
    throw ShapeError("backbone: input " + shape_string(view.shape()) +
                     " not divisible by total stride " + std::to_string(s));
  }
  // Fixed input standardization: views live in [0,1].
  Tensor x = scale(add(view, Tensor::scalar(-config_.input_mean)),
                   1.0 / config_.input_std);
  for (const auto& layer : stages_) {
    if (layer.stride == 1) {
      x = conv2d(pad2d(x, 1, 1, 1, 1, config_.padding), layer.weight,
                 layer.bias, 1, 0);
    } else {
      // "Same" padding for strided 3x3 kernels: the extra row/column goes to
      // the bottom/right so the output extent is exactly in / stride.
      const std::size_t h = x.dim(1), w = x.dim(2), st = layer.stride;
      const std::size_t ph = (h / st - 1) * st + 3 - h;
      const std::size_t pw = (w / st - 1) * st + 3 - w;
      x = conv2d(pad2d(x, ph / 2, ph - ph / 2, pw / 2, pw - pw / 2,
                       config_.padding),
                 layer.weight, layer.bias, st, 0);
    }
    x = relu(x);
  }
  return x;
}

Tensor Network::project_2d(const Tensor& features) const {
  return apply_mlp(proj2d_, features, config_.head_norm);
}

Tensor Network::predict_local(const Tensor& aligned) const {
  return apply_mlp(pred2d_, aligned, config_.head_norm);
}

Tensor Network::project_1d(const Tensor& features) const {
  const Tensor pooled = global_avg_pool(features);
  const std::size_t c = pooled.dim(0);
  const Tensor z = apply_mlp(proj1d_, reshape(pooled, {c, 1, 1}), false);
  return reshape(z, {z.dim(0)});
}

Tensor Network::predict_1d(const Tensor& projection) const {
  if (projection.rank() != 1) {
    throw ShapeError("predict_1d: expected a vector, got " +
                     shape_string(projection.shape()));
  }
  const std::size_t c = projection.dim(0);
  const Tensor q = apply_mlp(pred1d_, reshape(projection, {c, 1, 1}), false);
  return reshape(q, {q.dim(0)});
}

Tensor Network::project_predict_1d(const Tensor& features) const {
  return predict_1d(project_1d(features));
}

SiamesePair SiamesePair::create(const NetworkConfig& config, Rng& rng) {
  SiamesePair pair;
  pair.online = Network::initialize(config, rng);
  pair.target = pair.online.clone(false);
  return pair;
}

void ema_update(SiamesePair& pair, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) {
    throw InvalidArgument("ema_update: tau must be in [0,1]");
  }
  auto online = pair.online.named_parameters();
  auto target = pair.target.named_parameters();
  if (online.size() != target.size()) {
    throw ShapeError("ema_update: online/target parameter count differs");
  }
  for (std::size_t i = 0; i < online.size(); ++i) {
    auto src = online[i].second.data();
    auto dst = target[i].second.mutable_data();
    if (src.size() != dst.size()) {
      throw ShapeError("ema_update: shape mismatch for " + online[i].first);
    }
    for (std::size_t k = 0; k < dst.size(); ++k) {
      dst[k] = tau * dst[k] + (1.0 - tau) * src[k];
    }
  }
}

double momentum_schedule(std::size_t step, std::size_t total_steps,
                         double tau_base) {
  if (total_steps == 0 || step > total_steps) {
    throw InvalidArgument("momentum_schedule: need 0 <= step <= total_steps");
  }
  const double progress =
      static_cast<double>(step) / static_cast<double>(total_steps);
  return 1.0 - (1.0 - tau_base) *
                   (std::cos(std::numbers::pi * progress) + 1.0) / 2.0;
}

Tensor self_attention_predict(const Tensor& aligned, const Tensor& local_pred,
                              bool residual) {
  if (aligned.rank() != 3 || local_pred.rank() != 3 ||
      aligned.dim(1) != local_pred.dim(1) ||
      aligned.dim(2) != local_pred.dim(2)) {
    throw ShapeError("self_attention_predict: extents differ: " +
                     shape_string(aligned.shape()) + " vs " +
                     shape_string(local_pred.shape()));
  }
  const std::size_t c = aligned.dim(0), h = aligned.dim(1), w = aligned.dim(2);
  const std::size_t cp = local_pred.dim(0), n = h * w;
  // Unit pixel features as columns: [C, HW].
  const Tensor unit = l2_normalize(reshape(aligned, {c, n}), 0);
  // sim[p, p'] = max(cos, 0)^2, symmetric.
  const Tensor sim = square(relu(matmul(transpose(unit), unit)));
  // Q[:, p] = sum_p' P[:, p'] sim[p', p]
  Tensor q = reshape(matmul(reshape(local_pred, {cp, n}), sim), {cp, h, w});
  if (residual) {
    q = add(q, local_pred);
  }
  return q;
}

} // namespace msiam

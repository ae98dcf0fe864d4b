#include "multisiam/trainer.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "multisiam/ops.h"
#include "multisiam/view_sampler.h"

namespace msiam {

NetworkConfig network_config(const TrainConfig& config) {
  NetworkConfig net;
  net.pred2d_extra_in = (config.alignment == AlignMode::kOffset &&
                         config.loss_mode != LossMode::kMoco)
                            ? 2
                            : 0;
  net.head_norm = config.head_norm;
  return net;
}

TrainState init_state(const TrainConfig& config) {
  TrainState state;
  state.config = config;
  Rng rng(derive_seed(config.seed, "init"));
  state.pair = SiamesePair::create(network_config(config), rng);
  for (const auto& [name, p] : state.pair.online.named_parameters()) {
    state.velocity.emplace_back(p.numel(), 0.0);
  }
  const std::size_t capacity =
      config.loss_mode == LossMode::kMoco ? config.queue_size : 0;
  state.queue = NegativeQueue(capacity, network_config(config).proj2d_out);
  return state;
}

double effective_lr(std::size_t step, const TrainConfig& config) {
  if (step > config.steps) {
    throw InvalidArgument("effective_lr: step beyond the schedule");
  }
  const double progress =
      static_cast<double>(step) / static_cast<double>(config.steps);
  return config.lr_base * static_cast<double>(config.batch_size) / 256.0 *
         (std::cos(std::numbers::pi * progress) + 1.0) / 2.0;
}

namespace {

void check_velocity(const std::vector<Tensor>& params,
                    std::vector<std::vector<double>>& velocity) {
  if (velocity.size() != params.size()) {
    throw ShapeError("optimizer: velocity count does not match parameters");
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (velocity[t].size() != params[t].numel()) {
      throw ShapeError("optimizer: velocity shape mismatch for tensor " +
                       std::to_string(t));
    }
  }
}

double grad_at(const Tensor& p, std::size_t i) {
  return p.has_grad() ? p.grad()[i] : 0.0;
}

std::vector<Tensor> online_params(const TrainState& state) {
  std::vector<Tensor> out;
  for (auto& [name, p] : state.pair.online.named_parameters()) out.push_back(p);
  return out;
}

} // namespace

void sgd_step(const std::vector<Tensor>& params,
              std::vector<std::vector<double>>& velocity, double lr,
              double momentum, double weight_decay) {
  check_velocity(params, velocity);
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor p = params[t];
    auto w = p.mutable_data();
    auto& v = velocity[t];
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum * v[i] + (grad_at(p, i) + weight_decay * w[i]);
      w[i] -= lr * v[i];
    }
  }
}

void lars_step(const std::vector<Tensor>& params,
               std::vector<std::vector<double>>& velocity, double lr,
               double momentum, double weight_decay, double trust,
               double eps) {
  check_velocity(params, velocity);
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor p = params[t];
    auto w = p.mutable_data();
    const bool adapt = p.rank() != 1; // biases and other 1-d tensors
    const double wd = adapt ? weight_decay : 0.0;
    std::vector<double> d(w.size());
    double wn = 0, dn = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      d[i] = grad_at(p, i) + wd * w[i];
      wn += w[i] * w[i];
      dn += d[i] * d[i];
    }
    wn = std::sqrt(wn);
    dn = std::sqrt(dn);
    const double local =
        (adapt && wn > 0.0 && dn > 0.0) ? trust * wn / (dn + eps) : 1.0;
    auto& v = velocity[t];
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum * v[i] + local * d[i];
      w[i] -= lr * v[i];
    }
  }
}

namespace {

struct OrderingLoss {
  Tensor loss;
  double l1d = 0, l2d = 0;
  std::vector<double> embedding;
  Tensor enqueue;
};

// Online branch sees view `on` with backbone map `f_on`; the target sees
// view `tg` with map `f_tg`.
OrderingLoss ordering_loss(const TrainState& state, const Tensor& f_on,
                           const Tensor& f_tg, const ViewSpec& on,
                           const ViewSpec& tg, Rng& kmeans_rng) {
  const TrainConfig& cfg = state.config;
  const Network& online = state.pair.online;
  const Network& target = state.pair.target;
  OrderingLoss out;

  const Tensor z = online.project_1d(f_on);
  const Tensor q = online.predict_1d(z);
  out.embedding.assign(z.data().begin(), z.data().end());
  Tensor z_target;
  {
    NoGradGuard guard;
    z_target = target.project_1d(f_tg);
  }
  const Tensor l1d = loss_1d(q, z_target);

  Tensor l2d;
  if (cfg.loss_mode == LossMode::kMoco) {
    MocoOutput mo = moco_pixel_infonce(
        online, target, flip_back(f_on, on.flipped), flip_back(f_tg, tg.flipped),
        on, tg, state.queue, cfg.k, cfg.kmeans_metric, cfg.kmeans_max_iter,
        cfg.temperature, cfg.residual, kmeans_rng);
    l2d = mo.loss;
    out.enqueue = mo.target_pixels;
  } else {
    const Tensor g = flip_back(online.project_2d(f_on), on.flipped);
    Tensor g_target;
    {
      NoGradGuard guard;
      g_target = flip_back(target.project_2d(f_tg), tg.flipped);
    }
    const AlignedPair aligned =
        align_pair(g, g_target, on, tg, cfg.alignment, cfg.normalize_offset);
    const Tensor local = online.predict_local(aligned.online);
    const Tensor pred =
        cfg.self_attention
            ? self_attention_predict(aligned.online, local, cfg.residual)
            : local;
    if (cfg.loss_mode == LossMode::kCluster) {
      const ClusterResult clusters = kmeans(aligned.target, cfg.k,
                                            cfg.kmeans_metric,
                                            cfg.kmeans_max_iter, kmeans_rng);
      l2d = loss_2d_cluster(pred, clusters, cfg.dense, aligned.target);
    } else {
      l2d = loss_2d_wo_kmeans(pred, aligned.target);
    }
  }
  out.l1d = l1d.item();
  out.l2d = l2d.item();
  out.loss = loss_total(l1d, l2d, cfg.lambda);
  return out;
}

SamplerConfig sampler_config(const TrainConfig& cfg) {
  SamplerConfig s;
  s.iou_threshold = cfg.iou_threshold;
  s.min_scale = cfg.min_scale;
  s.out_h = s.out_w = cfg.view_size;
  return s;
}

std::string diagnostic_dump(const TrainState& state, std::size_t step,
                            std::size_t item, const ImageLoss& il) {
  std::ostringstream os;
  os << "non-finite loss at step " << step << ", batch item " << item
     << ": loss=" << il.loss.item() << " l1d=" << il.l1d << " l2d=" << il.l2d
     << "\nparameter norms (value, grad):\n";
  for (const auto& [name, p] : state.pair.online.named_parameters()) {
    double wn = 0, gn = 0;
    for (double v : p.data()) wn += v * v;
    if (p.has_grad())
      for (double v : p.grad()) gn += v * v;
    os << "  " << name << " " << std::sqrt(wn) << " " << std::sqrt(gn) << "\n";
  }
  return os.str();
}

} // namespace

ImageLoss pair_loss(const TrainState& state, const Tensor& image,
                    const ViewPair& pair, Rng& kmeans_rng) {
  const Network& online = state.pair.online;
  const Network& target = state.pair.target;
  const Tensor va = render_view(image, pair.a);
  const Tensor vb = render_view(image, pair.b);

  const Tensor fa = online.backbone(va);
  Tensor fb_target;
  Tensor fa_target;
  {
    NoGradGuard guard;
    fb_target = target.backbone(vb);
    if (state.config.symmetrize) fa_target = target.backbone(va);
  }
  ImageLoss out;
  OrderingLoss ab = ordering_loss(state, fa, fb_target, pair.a, pair.b,
                                  kmeans_rng);
  out.embedding = std::move(ab.embedding);
  if (ab.enqueue.defined()) out.enqueue.push_back(ab.enqueue);
  if (!state.config.symmetrize) {
    out.loss = ab.loss;
    out.l1d = ab.l1d;
    out.l2d = ab.l2d;
    return out;
  }
  const Tensor fb = online.backbone(vb);
  OrderingLoss ba = ordering_loss(state, fb, fa_target, pair.b, pair.a,
                                  kmeans_rng);
  if (ba.enqueue.defined()) out.enqueue.push_back(ba.enqueue);
  out.loss = scale(add(ab.loss, ba.loss), 0.5);
  out.l1d = 0.5 * (ab.l1d + ba.l1d);
  out.l2d = 0.5 * (ab.l2d + ba.l2d);
  return out;
}

ImageLoss image_loss(const TrainState& state, const Tensor& image,
                     Rng& sample_rng, Rng& kmeans_rng) {
  const ViewPair pair = sample_view_pair(image.dim(1), image.dim(2),
                                         sampler_config(state.config),
                                         sample_rng);
  return pair_loss(state, image, pair, kmeans_rng);
}

double feature_std(const std::vector<std::vector<double>>& embeddings) {
  if (embeddings.size() < 2) {
    return 0.0;
  }
  const std::size_t d = embeddings[0].size();
  std::vector<std::vector<double>> unit = embeddings;
  std::vector<double> mean(d, 0.0);
  for (auto& row : unit) {
    double ss = 0;
    for (double v : row) ss += v * v;
    const double n = std::max(std::sqrt(ss), 1e-12);
    for (std::size_t i = 0; i < d; ++i) {
      row[i] /= n;
      mean[i] += row[i];
    }
  }
  const double b = static_cast<double>(unit.size());
  for (double& m : mean) m /= b;
  double var = 0;
  for (const auto& row : unit)
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mean[i]) * (row[i] - mean[i]);
  return std::sqrt(var / b);
}

std::vector<std::size_t> batch_indices(const TrainConfig& config,
                                       std::size_t step,
                                       std::size_t corpus_size) {
  if (corpus_size == 0) {
    throw InvalidArgument("batch_indices: empty corpus");
  }
  Rng rng(derive_seed(config.seed, "batch", step));
  std::vector<std::size_t> out(config.batch_size);
  for (auto& i : out) i = static_cast<std::size_t>(rng.below(corpus_size));
  return out;
}

StepMetrics accumulate_gradients(TrainState& state,
                                 const std::vector<Tensor>& images,
                                 std::size_t step, double grad_scale,
                                 std::vector<Tensor>* enqueue) {
  StepMetrics m;
  m.step = step;
  std::vector<std::vector<double>> embeddings;
  for (std::size_t i = 0; i < images.size(); ++i) {
    Rng sample_rng(derive_seed(state.config.seed, "views", step, i));
    Rng kmeans_rng(derive_seed(state.config.seed, "kmeans", step, i));
    ImageLoss il = image_loss(state, images[i], sample_rng, kmeans_rng);
    if (!std::isfinite(il.loss.item())) {
      throw NumericError(diagnostic_dump(state, step, i, il));
    }
    scale(il.loss, grad_scale).backward();
    m.loss += il.loss.item();
    m.l1d += il.l1d;
    m.l2d += il.l2d;
    embeddings.push_back(std::move(il.embedding));
    if (enqueue != nullptr) {
      enqueue->insert(enqueue->end(), il.enqueue.begin(), il.enqueue.end());
    }
  }
  const double n = static_cast<double>(images.size());
  m.loss /= n;
  m.l1d /= n;
  m.l2d /= n;
  m.feature_std = feature_std(embeddings);
  return m;
}

StepMetrics train_step(TrainState& state,
                       const std::vector<LabeledImage>& corpus) {
  const TrainConfig& cfg = state.config;
  if (state.step >= cfg.steps) {
    throw InvalidArgument("train_step: run already finished");
  }
  std::vector<Tensor> images;
  for (auto idx : batch_indices(cfg, state.step, corpus.size())) {
    images.push_back(corpus[idx].image);
  }
  // An empty queue makes the first InfoNCE terms trivially 0. Seed it with
  // target pixels of the first batch, from views of a separate stream.
  if (cfg.loss_mode == LossMode::kMoco && state.step == 0 &&
      state.queue.size() == 0 && state.queue.capacity() > 0) {
    NoGradGuard guard;
    for (std::size_t i = 0; i < images.size(); ++i) {
      Rng sample_rng(derive_seed(cfg.seed, "queue_warmup", i));
      Rng kmeans_rng(derive_seed(cfg.seed, "queue_warmup_kmeans", i));
      for (const Tensor& rows : image_loss(state, images[i], sample_rng, kmeans_rng).enqueue) {
        const std::size_t dim = rows.dim(1);
        for (std::size_t r = 0; r < rows.dim(0); ++r) {
          state.queue.push(rows.data().subspan(r * dim, dim));
        }
      }
    }
  }
  std::vector<Tensor> enqueue;
  const double grad_scale =
      1.0 / static_cast<double>(cfg.batch_size * cfg.accumulation_steps);
  StepMetrics m =
      accumulate_gradients(state, images, state.step, grad_scale, &enqueue);
  m.lr = effective_lr(state.step, cfg);
  m.tau = momentum_schedule(state.step, cfg.steps, cfg.tau_base);

  const bool boundary = (state.step + 1) % cfg.accumulation_steps == 0 ||
                        state.step + 1 == cfg.steps;
  if (boundary) {
    const auto params = online_params(state);
    if (cfg.predictor_lr_scale != 1.0) {
      for (auto& [name, p] : state.pair.online.named_parameters()) {
        if (name.rfind("predictor", 0) != 0 || !p.has_grad()) continue;
        for (double& g : p.mutable_grad()) g *= cfg.predictor_lr_scale;
      }
    }
    if (cfg.optimizer == OptimizerKind::kSgd) {
      sgd_step(params, state.velocity, m.lr, cfg.momentum, cfg.weight_decay);
    } else {
      lars_step(params, state.velocity, m.lr, cfg.momentum, cfg.weight_decay,
                cfg.lars_trust, cfg.lars_eps);
    }
    for (auto p : params) p.clear_grad();
    ema_update(state.pair, m.tau);
  }
  for (const Tensor& rows : enqueue) {
    const std::size_t dim = rows.dim(1);
    for (std::size_t r = 0; r < rows.dim(0); ++r) {
      state.queue.push(rows.data().subspan(r * dim, dim));
    }
  }
  ++state.step;
  return m;
}

void train(TrainState& state, const std::vector<LabeledImage>& corpus,
           const std::function<void(const StepMetrics&)>& on_step) {
  while (state.step < state.config.steps) {
    const StepMetrics m = train_step(state, corpus);
    if (on_step) on_step(m);
  }
}

SceneSpec scene_spec(const TrainConfig& config, bool held_out) {
  SceneSpec spec;
  spec.height = spec.width = config.image_size;
  spec.min_instances = config.min_instances;
  spec.max_instances = config.max_instances;
  spec.seed = derive_seed(config.seed, held_out ? "heldout" : "corpus");
  return spec;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little,
                "binary formats assume a little-endian host");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw FormatError("checkpoint: truncated file");
  }
  return v;
}

void put_tensor(std::ostream& os, const std::string& name, const Shape& shape,
                std::span<const double> values) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put<std::uint64_t>(os, d);
  put<std::uint8_t>(os, 0);
  os.write(reinterpret_cast<const char*>(values.data()),
           static_cast<std::streamsize>(values.size() * sizeof(double)));
}

struct RawTensor {
  Shape shape;
  std::vector<double> values;
};

} // namespace

void save_checkpoint(const TrainState& state,
                     const std::filesystem::path& path) {
  struct Entry {
    std::string name;
    Shape shape;
    std::span<const double> values;
  };
  std::vector<Entry> entries;
  const auto online = state.pair.online.named_parameters();
  const auto target = state.pair.target.named_parameters();
  for (const auto& [name, p] : online)
    entries.push_back({"online/" + name, p.shape(), p.data()});
  for (const auto& [name, p] : target)
    entries.push_back({"target/" + name, p.shape(), p.data()});
  for (std::size_t t = 0; t < online.size(); ++t) {
    entries.push_back({"opt/velocity/" + online[t].first,
                       online[t].second.shape(), state.velocity[t]});
    if (online[t].second.has_grad()) {
      entries.push_back({"opt/grad/" + online[t].first,
                         online[t].second.shape(), online[t].second.grad()});
    }
  }
  const std::vector<double> queue_state = {
      static_cast<double>(state.queue.size()),
      static_cast<double>(state.queue.cursor())};
  entries.push_back({"queue/storage",
                     {state.queue.capacity(), state.queue.dim()},
                     state.queue.storage()});
  entries.push_back({"queue/state", {2}, queue_state});

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) {
      throw Error("checkpoint: cannot open " + tmp.string() + " for writing");
    }
    os.write("MSIA", 4);
    put<std::uint32_t>(os, kCheckpointVersion);
    put<std::uint64_t>(os, state.step);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) put_tensor(os, e.name, e.shape, e.values);
    const std::string text = state.config.to_text();
    put<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!os) {
      throw Error("checkpoint: write failed for " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw Error("checkpoint: cannot open " + path.string());
  }
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MSIA", 4) != 0) {
    throw FormatError("checkpoint: bad magic in " + path.string());
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " +
                      std::to_string(version));
  }
  const auto step = get<std::uint64_t>(is);
  const auto count = get<std::uint32_t>(is);
  std::map<std::string, RawTensor> tensors;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = get<std::uint32_t>(is);
    if (len > 4096) throw FormatError("checkpoint: implausible name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("checkpoint: truncated file");
    RawTensor raw;
    const auto ndim = get<std::uint32_t>(is);
    if (ndim > 8) throw FormatError("checkpoint: implausible rank for " + name);
    for (std::uint32_t d = 0; d < ndim; ++d) {
      raw.shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(is)));
    }
    const auto dtype = get<std::uint8_t>(is);
    const std::size_t n = shape_numel(raw.shape);
    if (n > (std::size_t{1} << 32)) throw FormatError("checkpoint: tensor too large");
    raw.values.resize(n);
    if (dtype == 0) {
      if (!is.read(reinterpret_cast<char*>(raw.values.data()),
                   static_cast<std::streamsize>(n * sizeof(double)))) {
        throw FormatError("checkpoint: truncated data for " + name);
      }
    } else if (dtype == 1) {
      for (auto& v : raw.values) v = get<float>(is);
    } else {
      throw FormatError("checkpoint: unknown dtype for " + name);
    }
    tensors.emplace(std::move(name), std::move(raw));
  }
  const auto text_len = get<std::uint32_t>(is);
  std::string text(text_len, '\0');
  if (!is.read(text.data(), text_len)) {
    throw FormatError("checkpoint: truncated config block");
  }

  TrainState state = init_state(parse_config(text));
  if (step > state.config.steps) {
    throw FormatError("checkpoint: step beyond configured steps");
  }
  state.step = static_cast<std::size_t>(step);
  auto take = [&tensors](const std::string& name,
                         const Shape& shape) -> const RawTensor& {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
      throw FormatError("checkpoint: missing tensor " + name);
    }
    if (it->second.shape != shape) {
      throw FormatError("checkpoint: shape mismatch for " + name + ": " +
                        shape_string(it->second.shape) + " vs " +
                        shape_string(shape));
    }
    return it->second;
  };
  auto fill = [](Tensor t, const std::vector<double>& v) {
    std::copy(v.begin(), v.end(), t.mutable_data().begin());
  };
  const auto online = state.pair.online.named_parameters();
  const auto target = state.pair.target.named_parameters();
  for (std::size_t t = 0; t < online.size(); ++t) {
    const auto& [name, p] = online[t];
    fill(p, take("online/" + name, p.shape()).values);
    fill(target[t].second, take("target/" + name, p.shape()).values);
    state.velocity[t] = take("opt/velocity/" + name, p.shape()).values;
    if (tensors.count("opt/grad/" + name) != 0) {
      const auto& g = take("opt/grad/" + name, p.shape()).values;
      Tensor param = p;
      param.zero_grad();
      std::copy(g.begin(), g.end(), param.mutable_grad().begin());
    }
  }
  const auto& qs = take("queue/state", {2}).values;
  state.queue.restore(
      take("queue/storage", {state.queue.capacity(), state.queue.dim()}).values,
      static_cast<std::size_t>(qs[0]), static_cast<std::size_t>(qs[1]));
  return state;
}

std::pair<double, double> smoothed_endpoints(const std::vector<double>& values) {
  const std::size_t n = values.size();
  if (n < 2) {
    throw InvalidArgument("smoothed_endpoints: need at least two values");
  }
  const std::size_t window = std::min(std::max<std::size_t>(10, n / 10), n / 2);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < window; ++i) {
    first += values[i];
    last += values[n - window + i];
  }
  return {first / window, last / window};
}

} // namespace msiam

#include "multisiam/gradsuite.h"

#include <cmath>
#include <functional>
#include <map>

#include "multisiam/alignment.h"
#include "multisiam/network.h"
#include "multisiam/objective.h"
#include "multisiam/ops.h"
#include "multisiam/rng.h"

namespace msiam {

namespace {

Tensor randn(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

// Normal draws pushed at least `gap` away from zero.
Tensor randn_away(Shape shape, Rng& rng, double gap = 0.1) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    x = rng.normal();
    x += x < 0 ? -gap : gap;
  }
  return Tensor::from(std::move(shape), std::move(v));
}

RelBox random_roi(Rng& rng) {
  RelBox r;
  r.x0 = rng.uniform(0.0, 0.5);
  r.x1 = rng.uniform(r.x0 + 0.2, 1.0);
  r.y0 = rng.uniform(0.0, 0.5);
  r.y1 = rng.uniform(r.y0 + 0.2, 1.0);
  return r;
}

ViewSpec random_spec(Rng& rng) {
  ViewSpec s;
  s.box.x0 = rng.uniform(0.0, 20.0);
  s.box.y0 = rng.uniform(0.0, 20.0);
  s.box.x1 = s.box.x0 + rng.uniform(30.0, 44.0);
  s.box.y1 = s.box.y0 + rng.uniform(30.0, 44.0);
  s.flipped = rng.bernoulli(0.5);
  return s;
}

NetworkConfig tiny_net() {
  NetworkConfig c;
  c.stages = {{4, 2}, {4, 1}};
  c.proj2d_hidden = 6;
  c.proj2d_out = 3;
  c.pred2d_hidden = 6;
  c.pred2d_extra_in = 2;
  c.proj1d_hidden = 6;
  c.proj1d_out = 4;
  c.pred1d_hidden = 6;
  return c;
}

std::vector<Tensor> params_with_prefix(const Network& net,
                                       const std::string& prefix) {
  std::vector<Tensor> out;
  for (auto& [name, p] : net.named_parameters())
    if (name.rfind(prefix, 0) == 0) out.push_back(p);
  return out;
}

using Check = std::function<GradCheckReport(Rng&)>;

std::vector<std::pair<std::string, Check>> checks() {
  std::vector<std::pair<std::string, Check>> c;
  auto unary = [&c](const std::string& name, std::function<Tensor(const Tensor&)> f,
                    Shape shape, bool kinked = false) {
    c.emplace_back(name, [=](Rng& rng) {
      return finite_difference_check(
          name, [f](const std::vector<Tensor>& x) { return f(x[0]); },
          {kinked ? randn_away(shape, rng) : randn(shape, rng)});
    });
  };
  auto binary = [&c](const std::string& name,
                     std::function<Tensor(const Tensor&, const Tensor&)> f,
                     Shape sa, Shape sb) {
    c.emplace_back(name, [=](Rng& rng) {
      return finite_difference_check(
          name, [f](const std::vector<Tensor>& x) { return f(x[0], x[1]); },
          {randn(sa, rng), randn(sb, rng)});
    });
  };

  binary("add", [](auto& a, auto& b) { return add(a, b); }, {3, 4}, {3, 4});
  binary("sub", [](auto& a, auto& b) { return sub(a, b); }, {3, 4}, {3, 4});
  binary("mul", [](auto& a, auto& b) { return mul(a, b); }, {3, 4}, {3, 4});
  binary("mul_scalar_broadcast", [](auto& a, auto& b) { return mul(a, b); },
         {3, 4}, {});
  unary("scale", [](auto& a) { return scale(a, -1.7); }, {3, 4});
  unary("negate", [](auto& a) { return negate(a); }, {3, 4});
  unary("square", [](auto& a) { return square(a); }, {3, 4});
  unary("relu", [](auto& a) { return relu(a); }, {3, 4}, true);
  unary("sum", [](auto& a) { return sum(a); }, {2, 3, 4});
  unary("mean", [](auto& a) { return mean(a); }, {2, 3, 4});
  unary("sum_axis", [](auto& a) { return sum_axis(a, 1); }, {2, 3, 4});
  unary("reshape", [](auto& a) { return reshape(a, {4, 6}); }, {2, 3, 4});
  unary("transpose", [](auto& a) { return transpose(a); }, {3, 5});
  binary("matmul", [](auto& a, auto& b) { return matmul(a, b); }, {3, 4}, {4, 2});
  binary("concat", [](auto& a, auto& b) { return concat({a, b}, 1); }, {2, 3},
         {2, 2});
  c.emplace_back("conv2d_3x3_stride1", [](Rng& rng) {
    return finite_difference_check(
        "conv2d_3x3_stride1",
        [](const std::vector<Tensor>& x) { return conv2d(x[0], x[1], x[2], 1, 1); },
        {randn({2, 5, 5}, rng), randn({3, 2, 3, 3}, rng), randn({3}, rng)});
  });
  c.emplace_back("conv2d_3x3_stride2", [](Rng& rng) {
    return finite_difference_check(
        "conv2d_3x3_stride2",
        [](const std::vector<Tensor>& x) { return conv2d(x[0], x[1], x[2], 2, 1); },
        {randn({2, 5, 5}, rng), randn({3, 2, 3, 3}, rng), randn({3}, rng)});
  });
  c.emplace_back("conv2d_1x1", [](Rng& rng) {
    return finite_difference_check(
        "conv2d_1x1",
        [](const std::vector<Tensor>& x) { return conv2d(x[0], x[1], x[2], 1, 0); },
        {randn({3, 4, 3}, rng), randn({2, 3, 1, 1}, rng), randn({2}, rng)});
  });
  unary("pad2d_zero", [](auto& a) { return pad2d(a, 0, 1, 1, 0); }, {2, 3, 3});
  unary("pad2d_replicate",
        [](auto& a) { return pad2d(a, 1, 2, 2, 1, PadMode::kReplicate); }, {2, 3, 3});
  unary("standardize", [](auto& a) { return standardize(a, 1); }, {3, 6});
  unary("global_avg_pool", [](auto& a) { return global_avg_pool(a); }, {3, 4, 4});
  unary("l2_normalize", [](auto& a) { return l2_normalize(a, 0); }, {4, 3});
  binary("cosine_similarity",
         [](auto& a, auto& b) { return cosine_similarity(a, b); }, {5}, {5});
  unary("flip_horizontal", [](auto& a) { return flip_horizontal(a); }, {2, 3, 4});
  unary("flip_back", [](auto& a) { return flip_back(a, true); }, {2, 3, 4});
  unary("logsumexp_rows", [](auto& a) { return logsumexp_rows(a); }, {3, 5});
  c.emplace_back("roi_align", [](Rng& rng) {
    const RelBox roi = random_roi(rng);
    return finite_difference_check(
        "roi_align",
        [roi](const std::vector<Tensor>& x) { return roi_align(x[0], roi, 3, 3); },
        {randn({2, 4, 4}, rng)});
  });

  // Heads and backbone through their parameters.
  auto head = [&c](const std::string& name, const std::string& prefix,
                   std::function<Tensor(const Network&, Rng&)> run) {
    c.emplace_back(name, [=](Rng& rng) {
      Network net = Network::initialize(tiny_net(), rng);
      const std::uint64_t data_seed = derive_seed(rng.below(1u << 30), name);
      return finite_difference_check_params(
          name,
          [&net, run, data_seed]() {
            Rng data(data_seed);
            return run(net, data);
          },
          params_with_prefix(net, prefix));
    });
  };
  head("backbone", "backbone",
       [](const Network& n, Rng& r) { return n.backbone(randn({3, 8, 8}, r)); });
  head("projector2d", "projector2d",
       [](const Network& n, Rng& r) { return n.project_2d(randn({4, 3, 3}, r)); });
  head("predictor2d", "predictor2d", [](const Network& n, Rng& r) {
    return n.predict_local(randn({5, 3, 3}, r));
  });
  head("projector1d", "projector1d",
       [](const Network& n, Rng& r) { return n.project_1d(randn({4, 3, 3}, r)); });
  head("predictor1d", "predictor1d",
       [](const Network& n, Rng& r) { return n.predict_1d(randn({4}, r)); });

  for (bool residual : {false, true}) {
    const std::string name =
        residual ? "self_attention_residual" : "self_attention";
    c.emplace_back(name, [name, residual](Rng& rng) {
      return finite_difference_check(
          name,
          [residual](const std::vector<Tensor>& x) {
            return self_attention_predict(x[0], x[1], residual);
          },
          {randn({3, 3, 3}, rng), randn({2, 3, 3}, rng)});
    });
  }

  c.emplace_back("loss_1d", [](Rng& rng) {
    const Tensor target = randn({6}, rng);
    return finite_difference_check(
        "loss_1d",
        [target](const std::vector<Tensor>& x) { return loss_1d(x[0], target); },
        {randn({6}, rng)});
  });
  for (bool dense : {false, true}) {
    const std::string name = dense ? "loss_2d_dense" : "loss_2d_cluster";
    c.emplace_back(name, [name, dense](Rng& rng) {
      const Tensor target = randn({3, 3, 4}, rng);
      const ClusterResult clusters =
          kmeans(target, 3, KMeansMetric::kCosine, 10, rng);
      return finite_difference_check(
          name,
          [&](const std::vector<Tensor>& x) {
            return loss_2d_cluster(x[0], clusters, dense, target);
          },
          {randn({3, 3, 4}, rng)});
    });
  }
  c.emplace_back("loss_2d_wo_kmeans", [](Rng& rng) {
    const Tensor target = randn({3, 3, 3}, rng);
    return finite_difference_check(
        "loss_2d_wo_kmeans",
        [target](const std::vector<Tensor>& x) {
          return loss_2d_wo_kmeans(x[0], target);
        },
        {randn({3, 3, 3}, rng)});
  });
  c.emplace_back("loss_total", [](Rng& rng) {
    return finite_difference_check(
        "loss_total",
        [](const std::vector<Tensor>& x) { return loss_total(x[0], x[1], 0.3); },
        {randn({}, rng), randn({}, rng)});
  });
  c.emplace_back("pixel_infonce", [](Rng& rng) {
    const Tensor positives = randn({4, 2, 3}, rng);
    const Tensor negatives = l2_normalize(randn({7, 4}, rng), 1);
    return finite_difference_check(
        "pixel_infonce",
        [&](const std::vector<Tensor>& x) {
          return pixel_infonce(x[0], positives, negatives, 0.2);
        },
        {randn({4, 2, 3}, rng)});
  });
  c.emplace_back("moco_pixel_infonce", [](Rng& rng) {
    NetworkConfig cfg = tiny_net();
    cfg.pred2d_extra_in = 0;
    Network online = Network::initialize(cfg, rng);
    Network target = online.clone(false);
    NegativeQueue queue(16, cfg.proj2d_out);
    for (int i = 0; i < 10; ++i) {
      const Tensor v = randn({cfg.proj2d_out}, rng);
      queue.push(v.data());
    }
    const ViewSpec a = random_spec(rng);
    ViewSpec b = a;
    b.box.x0 += 4;
    b.box.x1 += 4;
    const Tensor f_target = randn({4, 3, 3}, rng);
    const std::uint64_t km_seed = rng.below(1u << 30);
    return finite_difference_check(
        "moco_pixel_infonce",
        [&](const std::vector<Tensor>& x) {
          Rng km(km_seed);
          return moco_pixel_infonce(online, target, x[0], f_target, a, b, queue,
                                    2, KMeansMetric::kCosine, 10, 0.2, false, km)
              .loss;
        },
        {randn({4, 3, 3}, rng)});
  });
  return c;
}

} // namespace

std::vector<GradCheckReport> run_gradient_suite(std::size_t seeds,
                                                std::uint64_t base_seed) {
  std::vector<GradCheckReport> out;
  for (const auto& [name, check] : checks()) {
    GradCheckReport worst;
    worst.op_name = name;
    for (std::size_t s = 0; s < seeds; ++s) {
      Rng rng(derive_seed(base_seed, name, s));
      GradCheckReport r = check(rng);
      worst.coordinates += r.coordinates;
      if (r.max_relative_error >= worst.max_relative_error) {
        worst.max_relative_error = r.max_relative_error;
        worst.worst_input = r.worst_input;
        worst.worst_index = r.worst_index;
      }
    }
    out.push_back(worst);
  }
  return out;
}

} // namespace msiam

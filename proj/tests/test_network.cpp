#include <chrono>
#include <cmath>

#include "doctest.h"
#include "multisiam/network.h"
#include "multisiam/objective.h"
#include "multisiam/ops.h"
#include "multisiam/trainer.h"

using namespace msiam;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform();
  return Tensor::from(std::move(shape), std::move(v));
}

Network make_net(std::uint64_t seed = 1, std::size_t extra = 2,
                 bool head_norm = true) {
  NetworkConfig cfg;
  cfg.pred2d_extra_in = extra;
  cfg.head_norm = head_norm;
  Rng rng(seed);
  return Network::initialize(cfg, rng);
}

void require_same(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == b[i]);
}

} // namespace

TEST_CASE("backbone shapes and determinism") {
  const Network net = make_net();
  Rng rng(2);
  const Tensor view = random_tensor({3, 64, 64}, rng);
  const Tensor f = net.backbone(view);
  CHECK(f.shape() == Shape{32, 8, 8});
  require_same(f, net.backbone(view.clone()));
  CHECK_THROWS_AS(net.backbone(random_tensor({3, 60, 64}, rng)), ShapeError);
  CHECK_THROWS_AS(net.backbone(random_tensor({1, 64, 64}, rng)), ShapeError);
}

TEST_CASE("zero final conv gives a constant map of its (rectified) bias") {
  Network net = make_net();
  auto& last = net.stages().back();
  for (double& w : last.weight.mutable_data()) w = 0.0;
  auto b = last.bias.mutable_data();
  for (std::size_t c = 0; c < b.size(); ++c) b[c] = 0.1 * static_cast<double>(c);
  Rng rng(3);
  const Tensor f = net.backbone(random_tensor({3, 32, 32}, rng));
  const std::size_t hw = f.dim(1) * f.dim(2);
  for (std::size_t c = 0; c < f.dim(0); ++c)
    for (std::size_t i = 0; i < hw; ++i) REQUIRE(f[c * hw + i] == b[c]);
}

TEST_CASE("2D heads commute with pixel permutations") {
  const Network net = make_net();
  Rng rng(4);
  for (auto [h, w] : {std::pair{1, 1}, std::pair{3, 5}, std::pair{8, 8}}) {
    const Tensor feat = random_tensor({32, std::size_t(h), std::size_t(w)}, rng);
    const Tensor g = net.project_2d(feat);
    CHECK(g.shape() == Shape{32, std::size_t(h), std::size_t(w)});
  }
  // Swap two pixels of the input and check the outputs swap the same way.
  const Tensor feat = random_tensor({34, 2, 3}, rng);
  std::vector<double> swapped(feat.data().begin(), feat.data().end());
  for (std::size_t c = 0; c < 34; ++c) std::swap(swapped[c * 6 + 0], swapped[c * 6 + 4]);
  const Tensor p = net.predict_local(feat);
  const Tensor q = net.predict_local(Tensor::from(feat.shape(), swapped));
  // Summation order changes with the swap, hence the tolerance.
  for (std::size_t c = 0; c < p.dim(0); ++c) {
    CHECK(p[c * 6 + 0] == doctest::Approx(q[c * 6 + 4]).epsilon(1e-12));
    CHECK(p[c * 6 + 4] == doctest::Approx(q[c * 6 + 0]).epsilon(1e-12));
    CHECK(p[c * 6 + 2] == doctest::Approx(q[c * 6 + 2]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(net.predict_local(random_tensor({32, 2, 2}, rng)), ShapeError);
  CHECK_NOTHROW(make_net(1, 0).predict_local(random_tensor({32, 2, 2}, rng)));
}

TEST_CASE("without head_norm the 2D heads act on each pixel alone") {
  const Network net = make_net(1, 2, false);
  Rng rng(5);
  const Tensor feat = random_tensor({32, 2, 3}, rng);
  const Tensor g = net.project_2d(feat);
  for (std::size_t px = 0; px < 6; ++px) {
    std::vector<double> one(32);
    for (std::size_t c = 0; c < 32; ++c) one[c] = feat[c * 6 + px];
    const Tensor single = net.project_2d(Tensor::from({32, 1, 1}, one));
    for (std::size_t c = 0; c < g.dim(0); ++c) CHECK(single[c] == g[c * 6 + px]);
  }
}

TEST_CASE("head_norm removes a per-channel shift of the input map") {
  const Network net = make_net();
  Rng rng(6);
  const Tensor feat = random_tensor({32, 4, 4}, rng);
  std::vector<double> shifted(feat.data().begin(), feat.data().end());
  for (std::size_t c = 0; c < 32; ++c)
    for (std::size_t p = 0; p < 16; ++p) shifted[c * 16 + p] += 0.3 * double(c % 5);
  const Tensor a = net.project_2d(feat);
  const Tensor b = net.project_2d(Tensor::from(feat.shape(), shifted));
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
}

TEST_CASE("offset mode widens the predictor input") {
  TrainConfig cfg;
  cfg.alignment = AlignMode::kOffset;
  CHECK(network_config(cfg).pred2d_extra_in == 2);
  cfg.alignment = AlignMode::kRoi;
  CHECK(network_config(cfg).pred2d_extra_in == 0);
}

TEST_CASE("1D path") {
  const Network net = make_net();
  Rng rng(5);
  const Tensor f = random_tensor({32, 8, 8}, rng);
  const Tensor z = net.project_1d(f);
  CHECK(z.shape() == Shape{64});
  const Tensor q = net.project_predict_1d(f);
  require_same(q, net.predict_1d(z));
  require_same(q, net.project_predict_1d(f));
}

TEST_CASE("self_attention_predict") {
  Rng rng(6);
  SUBCASE("single pixel") {
    const Tensor r = random_tensor({5, 1, 1}, rng);
    const Tensor p = random_tensor({4, 1, 1}, rng);
    const Tensor q = self_attention_predict(r, p, false);
    for (std::size_t i = 0; i < 4; ++i) CHECK(q[i] == doctest::Approx(p[i]).epsilon(1e-14));
  }
  SUBCASE("constant field sums every pixel") {
    const Tensor r = Tensor::full({3, 2, 3}, 0.7);
    const Tensor p = random_tensor({2, 2, 3}, rng);
    const Tensor q = self_attention_predict(r, p, false);
    for (std::size_t c = 0; c < 2; ++c) {
      double total = 0;
      for (std::size_t i = 0; i < 6; ++i) total += p[c * 6 + i];
      for (std::size_t i = 0; i < 6; ++i)
        CHECK(q[c * 6 + i] == doctest::Approx(total).epsilon(1e-13));
    }
  }
  SUBCASE("orthogonal pixels do not mix") {
    const Tensor r = Tensor::from({2, 1, 2}, {1, 0, 0, 1});
    const Tensor p = Tensor::from({1, 1, 2}, {2, 5});
    const Tensor q = self_attention_predict(r, p, false);
    CHECK(q[0] == doctest::Approx(2.0));
    CHECK(q[1] == doctest::Approx(5.0));
    const Tensor qr = self_attention_predict(r, p, true);
    CHECK(qr[0] == doctest::Approx(4.0));
  }
  SUBCASE("positive scaling of the local prediction leaves cosine losses") {
    const Tensor r = random_tensor({4, 3, 3}, rng);
    const Tensor p = random_tensor({4, 3, 3}, rng);
    const Tensor t = random_tensor({4, 3, 3}, rng);
    const double l1 = loss_2d_wo_kmeans(self_attention_predict(r, p, false), t).item();
    const double l2 =
        loss_2d_wo_kmeans(self_attention_predict(r, scale(p, 3.5), false), t).item();
    CHECK(l1 == doctest::Approx(l2).epsilon(1e-12));
  }
}

TEST_CASE("ema_update and momentum_schedule") {
  NetworkConfig cfg;
  Rng rng(7);
  SiamesePair pair = SiamesePair::create(cfg, rng);
  auto online = pair.online.named_parameters();
  auto target = pair.target.named_parameters();
  for (std::size_t p = 0; p < online.size(); ++p) {
    CHECK(online[p].first == target[p].first);
    CHECK_FALSE(target[p].second.requires_grad());
    for (double& v : online[p].second.mutable_data()) v += 1.0;
  }
  std::vector<std::vector<double>> before;
  for (auto& [n, t] : target) before.emplace_back(t.data().begin(), t.data().end());

  ema_update(pair, 1.0);
  for (std::size_t p = 0; p < target.size(); ++p)
    for (std::size_t i = 0; i < before[p].size(); ++i)
      REQUIRE(target[p].second[i] == before[p][i]);

  ema_update(pair, 0.0);
  for (std::size_t p = 0; p < target.size(); ++p)
    for (std::size_t i = 0; i < before[p].size(); ++i)
      REQUIRE(target[p].second[i] == online[p].second[i]);

  for (double& v : target[0].second.mutable_data()) v = 1.0;
  for (double& v : online[0].second.mutable_data()) v = 0.0;
  ema_update(pair, 0.996);
  CHECK(target[0].second[0] == doctest::Approx(0.996).epsilon(1e-15));
  CHECK_THROWS_AS(ema_update(pair, 1.5), InvalidArgument);

  CHECK(momentum_schedule(0, 100, 0.996) == 0.996);
  CHECK(momentum_schedule(100, 100, 0.996) == 1.0);
  CHECK(momentum_schedule(50, 100, 0.996) == doctest::Approx(0.998).epsilon(1e-15));
  CHECK_THROWS_AS(momentum_schedule(101, 100, 0.996), InvalidArgument);
}

TEST_CASE("ema_update is affine: tau then 1 equals tau") {
  NetworkConfig cfg;
  Rng r1(8), r2(8);
  SiamesePair a = SiamesePair::create(cfg, r1), b = SiamesePair::create(cfg, r2);
  for (auto* p : {&a, &b})
    for (auto& [n, t] : p->online.named_parameters())
      for (double& v : t.mutable_data()) v *= 0.5;
  ema_update(a, 0.9);
  ema_update(a, 1.0);
  ema_update(b, 0.9);
  auto ta = a.target.named_parameters(), tb = b.target.named_parameters();
  for (std::size_t p = 0; p < ta.size(); ++p) {
    CHECK(ta[p].second.shape() == tb[p].second.shape());
    for (std::size_t i = 0; i < ta[p].second.numel(); ++i)
      REQUIRE(ta[p].second[i] == tb[p].second[i]);
  }
}

TEST_CASE("one desk batch forward and backward fits the time budget") {
  TrainConfig cfg;
  TrainState state = init_state(cfg);
  const auto corpus = generate(scene_spec(cfg, false), cfg.batch_size);
  std::vector<Tensor> images;
  for (const auto& im : corpus) images.push_back(im.image);
  const auto t0 = std::chrono::steady_clock::now();
  accumulate_gradients(state, images, 0, 1.0 / 8);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("batch forward+backward: " << secs << " s");
  CHECK(secs < 2.0);
  for (auto& [n, t] : state.pair.target.named_parameters()) CHECK_FALSE(t.has_grad());
}

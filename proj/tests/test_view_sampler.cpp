#include <cmath>

#include "doctest.h"
#include "multisiam/view_sampler.h"

using namespace msiam;

namespace {

Tensor random_image(std::size_t h, std::size_t w, Rng& rng) {
  std::vector<double> v(3 * h * w);
  for (auto& x : v) x = rng.uniform();
  return Tensor::from({3, h, w}, std::move(v));
}

ViewSpec identity_spec(std::size_t h, std::size_t w) {
  ViewSpec s;
  s.box = {0, 0, static_cast<double>(w), static_cast<double>(h)};
  s.out_h = h;
  s.out_w = w;
  return s;
}

} // namespace

TEST_CASE("compute_iou") {
  const Box a{0, 0, 4, 4};
  CHECK(compute_iou(a, a) == 1.0);
  CHECK(compute_iou(a, Box{5, 5, 7, 7}) == 0.0);
  CHECK(compute_iou(a, Box{2, 0, 6, 4}) == doctest::Approx(1.0 / 3).epsilon(1e-15));

  Rng rng(1);
  SamplerConfig cfg;
  for (int t = 0; t < 500; ++t) {
    const Box x = sample_crop_box(64, 64, cfg, rng);
    const Box y = sample_crop_box(64, 64, cfg, rng);
    CHECK(compute_iou(x, y) == compute_iou(y, x));
    const double s = 0.25 + 3 * rng.uniform();
    const Box xs{x.x0 * s, x.y0 * s, x.x1 * s, x.y1 * s};
    const Box ys{y.x0 * s, y.y0 * s, y.x1 * s, y.y1 * s};
    CHECK(compute_iou(xs, ys) == doctest::Approx(compute_iou(x, y)).epsilon(1e-12));
  }
}

TEST_CASE("sampled pairs respect the IoU threshold") {
  Rng rng(2);
  SamplerConfig cfg;
  for (int t = 0; t < 1000; ++t) {
    const ViewPair p = sample_view_pair(64, 64, cfg, rng);
    REQUIRE(p.iou >= 0.5);
    CHECK(compute_iou(p.a.box, p.b.box) == p.iou);
  }
}

TEST_CASE("threshold 0 accepts the first candidate") {
  SamplerConfig cfg;
  cfg.iou_threshold = 0.0;
  Rng rng(3), replay(3);
  const ViewPair p = sample_view_pair(64, 64, cfg, rng);
  const Box a = sample_crop_box(64, 64, cfg, replay);
  const Box b = sample_crop_box(64, 64, cfg, replay);
  CHECK(p.a.box == a);
  CHECK(p.b.box == b);
}

TEST_CASE("fixed seed gives a deterministic in-bounds sequence") {
  SamplerConfig cfg;
  cfg.min_scale = 0.08;
  Rng r1(4), r2(4);
  for (int t = 0; t < 300; ++t) {
    const ViewPair p = sample_view_pair(64, 48, cfg, r1);
    const ViewPair q = sample_view_pair(64, 48, cfg, r2);
    CHECK(p.a == q.a);
    CHECK(p.b == q.b);
    for (const Box& b : {p.a.box, p.b.box}) {
      CHECK(b.valid());
      CHECK(b.x0 >= 0.0);
      CHECK(b.y0 >= 0.0);
      CHECK(b.x1 <= 48.0);
      CHECK(b.y1 <= 64.0);
      CHECK(b.area() >= 0.08 * 64 * 48 * (1 - 1e-9));
    }
  }
}

TEST_CASE("exhausted attempts return the best pair seen") {
  SamplerConfig cfg;
  cfg.iou_threshold = 0.999;
  cfg.max_attempts = 5;
  Rng rng(5), replay(5);
  const ViewPair p = sample_view_pair(64, 64, cfg, rng);
  double best = -1;
  for (int i = 0; i < 5; ++i) {
    const Box a = sample_crop_box(64, 64, cfg, replay);
    const Box b = sample_crop_box(64, 64, cfg, replay);
    best = std::max(best, compute_iou(a, b));
  }
  CHECK(p.iou == best);
}

TEST_CASE("invalid sampler configs are rejected") {
  Rng rng(6);
  SamplerConfig cfg;
  cfg.iou_threshold = 1.0;
  CHECK_THROWS_AS(sample_view_pair(64, 64, cfg, rng), InvalidArgument);
  cfg = {};
  cfg.min_scale = 0.0;
  CHECK_THROWS_AS(sample_view_pair(64, 64, cfg, rng), InvalidArgument);
}

TEST_CASE("render_view identities") {
  Rng rng(7);
  const Tensor img = random_image(16, 12, rng);
  const ViewSpec id = identity_spec(16, 12);

  const Tensor same = render_view(img, id);
  for (std::size_t i = 0; i < img.numel(); ++i)
    CHECK(same[i] == doctest::Approx(img[i]).epsilon(1e-12));

  ViewSpec flip = id;
  flip.flipped = true;
  const Tensor once = render_view(img, flip);
  const Tensor twice = render_view(once, flip);
  for (std::size_t i = 0; i < img.numel(); ++i)
    CHECK(twice[i] == doctest::Approx(img[i]).epsilon(1e-12));
  CHECK(once[0] == doctest::Approx(img[11]).epsilon(1e-12));
}

TEST_CASE("crop of a constant image stays constant") {
  const Tensor img = Tensor::full({3, 20, 20}, 0.3);
  ViewSpec s;
  s.box = {2.5, 3.25, 17.0, 11.0};
  s.out_h = s.out_w = 8;
  s.photo.brightness = 0;
  const Tensor out = render_view(img, s);
  for (double v : out.data()) CHECK(v == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("geometry does not depend on photometrics") {
  // Brightness alone is a per-pixel scale, so any geometric change would show
  // up as a mismatch against the neutral render.
  Rng rng(8);
  const Tensor img = random_image(24, 24, rng);
  SamplerConfig cfg;
  cfg.out_h = cfg.out_w = 16;
  for (int t = 0; t < 20; ++t) {
    const ViewPair p = sample_view_pair(24, 24, cfg, rng);
    ViewSpec neutral = p.a;
    neutral.photo = {};
    ViewSpec jittered = neutral;
    jittered.photo.brightness = 0.2;
    const Tensor n = render_view(img, neutral);
    const Tensor j = render_view(img, jittered);
    for (std::size_t i = 0; i < n.numel(); ++i)
      CHECK(j[i] == doctest::Approx(std::min(1.0, n[i] * 1.2)).epsilon(1e-12));
  }
}

TEST_CASE("photometric output is clamped") {
  Rng rng(9);
  const Tensor img = random_image(8, 8, rng);
  PhotoParams p;
  p.brightness = 0.4;
  p.contrast = 0.4;
  p.saturation = 0.2;
  p.hue = 0.1;
  p.blur_sigma = 0.7;
  p.solarize = true;
  const Tensor out = apply_photometric(img, p);
  for (double v : out.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("acceptance rate is monotone in the threshold") {
  Rng rng(10);
  SamplerConfig cfg;
  std::vector<double> ious;
  for (int t = 0; t < 4000; ++t) {
    const Box a = sample_crop_box(64, 64, cfg, rng);
    const Box b = sample_crop_box(64, 64, cfg, rng);
    ious.push_back(compute_iou(a, b));
  }
  double previous = 1.0;
  for (double th : {0.3, 0.4, 0.5, 0.6, 0.7}) {
    const double rate =
        static_cast<double>(std::count_if(ious.begin(), ious.end(),
                                          [&](double v) { return v >= th; })) /
        static_cast<double>(ious.size());
    CHECK(rate <= previous);
    previous = rate;
  }
}

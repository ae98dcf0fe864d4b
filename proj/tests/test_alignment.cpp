#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "multisiam/alignment.h"
#include "multisiam/gradcheck.h"
#include "multisiam/ops.h"

using namespace msiam;

namespace {

Tensor random_map(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

ViewSpec spec(double x0, double y0, double x1, double y1, bool flipped = false,
              std::size_t out = 64) {
  ViewSpec s;
  s.box = {x0, y0, x1, y1};
  s.flipped = flipped;
  s.out_h = s.out_w = out;
  return s;
}

// Textbook bilinear interpolation at a continuous pixel position, clamped to
// the pixel-center hull.
double bilinear(const Tensor& m, std::size_t c, double py, double px) {
  const std::size_t h = m.dim(1), w = m.dim(2);
  py = std::clamp(py, 0.0, static_cast<double>(h - 1));
  px = std::clamp(px, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(py));
  const auto x0 = static_cast<std::size_t>(std::floor(px));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = py - y0, fx = px - x0;
  auto at = [&](std::size_t y, std::size_t x) { return m[(c * h + y) * w + x]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
         fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

Tensor naive_roi_align(const Tensor& m, const RelBox& r, std::size_t oh,
                       std::size_t ow) {
  const std::size_t c = m.dim(0), h = m.dim(1), w = m.dim(2);
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const double ry = r.y0 + (i + 0.5) / oh * (r.y1 - r.y0);
        const double rx = r.x0 + (j + 0.5) / ow * (r.x1 - r.x0);
        out[(ch * oh + i) * ow + j] = bilinear(m, ch, ry * h - 0.5, rx * w - 0.5);
      }
  return Tensor::from({c, oh, ow}, out);
}

RelBox random_roi(Rng& rng) {
  const double a = rng.uniform(), b = rng.uniform();
  const double c = rng.uniform(), d = rng.uniform();
  RelBox r{std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)};
  if (r.x1 - r.x0 < 1e-3) r.x1 = std::min(1.0, r.x0 + 0.1), r.x0 = r.x1 - 0.1;
  if (r.y1 - r.y0 < 1e-3) r.y1 = std::min(1.0, r.y0 + 0.1), r.y0 = r.y1 - 0.1;
  return r;
}

} // namespace

TEST_CASE("grid_coord") {
  const Point c = grid_coord(spec(0, 0, 64, 48), 0, 0, 1, 1);
  CHECK(c.x == 32.0);
  CHECK(c.y == 24.0);
  const Point p = grid_coord(spec(10, 20, 74, 84), 0, 0, 8, 8);
  CHECK(p.x == doctest::Approx(14.0).epsilon(1e-15));
  CHECK(p.y == doctest::Approx(24.0).epsilon(1e-15));
  const Point f = grid_coord(spec(10, 20, 74, 84, true), 0, 0, 8, 8);
  CHECK(f.x == doctest::Approx(70.0).epsilon(1e-15));
  CHECK(f.y == doctest::Approx(24.0).epsilon(1e-15));
}

TEST_CASE("flip_back") {
  Rng rng(1);
  const Tensor m = random_map({3, 4, 5}, rng);
  const Tensor same = flip_back(m, false);
  const Tensor twice = flip_back(flip_back(m, true), true);
  for (std::size_t i = 0; i < m.numel(); ++i) {
    CHECK(same[i] == m[i]);
    CHECK(twice[i] == m[i]);
  }
  const Tensor row = flip_back(Tensor::from({1, 1, 2}, {1.5, -2.0}), true);
  CHECK(row[0] == -2.0);
  CHECK(row[1] == 1.5);
  double s0 = 0, s1 = 0;
  const Tensor f = flip_back(m, true);
  for (std::size_t i = 0; i < m.numel(); ++i) s0 += m[i], s1 += f[i];
  CHECK(s1 == doctest::Approx(s0).epsilon(1e-14));
}

TEST_CASE("intersection_relative") {
  const ViewSpec a = spec(0, 0, 40, 40);
  auto [ra, rb] = intersection_relative(a, a);
  CHECK(ra.x0 == 0.0);
  CHECK(ra.y0 == 0.0);
  CHECK(ra.x1 == 1.0);
  CHECK(ra.y1 == 1.0);
  CHECK(rb.x1 == 1.0);

  const ViewSpec half = spec(20, 0, 40, 40);
  auto [ha, hb] = intersection_relative(a, half);
  CHECK(ha.x0 == doctest::Approx(0.5));
  CHECK(ha.x1 == doctest::Approx(1.0));
  CHECK(ha.y0 == 0.0);
  CHECK(ha.y1 == 1.0);
  CHECK(hb.x0 == 0.0);
  CHECK(hb.x1 == 1.0);

  auto [sa, sb] = intersection_relative(half, a);
  CHECK(sa.x0 == hb.x0);
  CHECK(sb.x0 == ha.x0);

  CHECK_THROWS_AS(intersection_relative(a, spec(50, 50, 60, 60)),
                  InvalidArgument);
}

TEST_CASE("roi_align matches a naive bilinear oracle") {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const std::size_t h = 2 + rng.below(6), w = 2 + rng.below(6);
    const Tensor m = random_map({2, h, w}, rng);
    const RelBox r = random_roi(rng);
    const std::size_t oh = 1 + rng.below(5), ow = 1 + rng.below(5);
    const Tensor got = roi_align(m, r, oh, ow);
    const Tensor want = naive_roi_align(m, r, oh, ow);
    for (std::size_t i = 0; i < got.numel(); ++i)
      REQUIRE(std::abs(got[i] - want[i]) < 1e-9);
  }
}

TEST_CASE("roi_align identities") {
  Rng rng(3);
  const Tensor m = random_map({3, 5, 7}, rng);
  const Tensor id = roi_align(m, RelBox{}, 5, 7);
  for (std::size_t i = 0; i < m.numel(); ++i) CHECK(id[i] == m[i]);

  const Tensor k = Tensor::full({2, 4, 4}, -1.25);
  for (int t = 0; t < 10; ++t) {
    const Tensor out = roi_align(k, random_roi(rng), 3, 2);
    for (double v : out.data()) CHECK(v == doctest::Approx(-1.25).epsilon(1e-15));
  }

  const auto report = finite_difference_check(
      "roi_align",
      [](const std::vector<Tensor>& in) {
        return roi_align(in[0], RelBox{0.1, 0.2, 0.8, 0.9}, 3, 3);
      },
      {random_map({2, 4, 4}, rng)});
  CHECK(report.max_relative_error < 1e-5);
}

TEST_CASE("offset_map") {
  const ViewSpec a = spec(8, 4, 40, 36, false, 64);
  const Tensor zero = offset_map(a, a, 8, 8, true);
  for (double v : zero.data()) CHECK(v == 0.0);

  const double s = 6.0;
  const ViewSpec b = spec(8 + s, 4, 40 + s, 36, false, 64);
  const Tensor off = offset_map(a, b, 8, 8, true);
  const double span = 32.0 * 7.0 / 8.0;
  for (std::size_t i = 0; i < 64; ++i) {
    CHECK(std::abs(off[i] - s / span) < 1e-12);
    CHECK(std::abs(off[64 + i]) < 1e-12);
  }

  const ViewSpec c = spec(2, 11, 30, 50, true);
  const Tensor ab = offset_map(a, c, 8, 8, false);
  const Tensor ba = offset_map(c, a, 8, 8, false);
  for (std::size_t i = 0; i < ab.numel(); ++i)
    CHECK(ab[i] == doctest::Approx(-ba[i]).epsilon(1e-12));

  // Scaling both views leaves the normalized map unchanged.
  const double k = 2.5;
  auto scaled = [k](ViewSpec v) {
    v.box = {v.box.x0 * k, v.box.y0 * k, v.box.x1 * k, v.box.y1 * k};
    return v;
  };
  const Tensor n1 = offset_map(a, c, 8, 8, true);
  const Tensor n2 = offset_map(scaled(a), scaled(c), 8, 8, true);
  for (std::size_t i = 0; i < n1.numel(); ++i)
    CHECK(std::abs(n1[i] - n2[i]) < 1e-12);

  const Tensor single = offset_map(a, b, 1, 1, true);
  for (double v : single.data()) CHECK(std::isfinite(v));
}

TEST_CASE("align_pair modes") {
  Rng rng(4);
  const Tensor g = random_map({4, 8, 8}, rng), gp = random_map({4, 8, 8}, rng);
  const ViewSpec a = spec(0, 0, 32, 32);

  const AlignedPair none = align_pair(g, gp, a, spec(5, 5, 30, 30), AlignMode::kNone);
  CHECK(none.online.impl() == g.impl());
  CHECK(none.target.impl() == gp.impl());

  const AlignedPair off = align_pair(g, gp, a, a, AlignMode::kOffset);
  REQUIRE(off.online.dim(0) == 6);
  for (std::size_t i = 0; i < g.numel(); ++i) CHECK(off.online[i] == g[i]);
  for (std::size_t i = g.numel(); i < off.online.numel(); ++i)
    CHECK(off.online[i] == 0.0);
  CHECK(off.target.impl() == gp.impl());

  const AlignedPair roi = align_pair(g, gp, a, a, AlignMode::kRoi);
  for (std::size_t i = 0; i < g.numel(); ++i) {
    CHECK(roi.online[i] == g[i]);
    CHECK(roi.target[i] == gp[i]);
  }
  CHECK_THROWS_AS(align_pair(g, gp, a, spec(40, 40, 60, 60), AlignMode::kRoi),
                  InvalidArgument);
}

TEST_CASE("roi alignment puts both views on the same source points") {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const double ax = rng.uniform(0, 20), ay = rng.uniform(0, 20);
    const ViewSpec a = spec(ax, ay, ax + rng.uniform(20, 40),
                            ay + rng.uniform(20, 40), rng.bernoulli(0.5));
    const ViewSpec b = spec(ax + rng.uniform(-5, 10), ay + rng.uniform(-5, 10),
                            ax + rng.uniform(25, 44), ay + rng.uniform(25, 44),
                            rng.bernoulli(0.5));
    auto [ra, rb] = intersection_relative(a, b);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) {
        const Point pa = aligned_cell_coord(a, ra, i, j, 8, 8);
        const Point pb = aligned_cell_coord(b, rb, i, j, 8, 8);
        CHECK(std::abs(pa.x - pb.x) < 1e-9);
        CHECK(std::abs(pa.y - pb.y) < 1e-9);
      }
  }
}

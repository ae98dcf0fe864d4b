#include "multisiam/alignment.h"

#include <algorithm>
#include <cmath>

#include "multisiam/ops.h"

namespace msiam {

Point grid_coord(const ViewSpec& spec, std::size_t i, std::size_t j,
                 std::size_t h, std::size_t w) {
  const std::size_t col = spec.flipped ? w - 1 - j : j;
  const Box& b = spec.box;
  return {b.x0 + (static_cast<double>(col) + 0.5) *
                     (b.width() / static_cast<double>(w)),
          b.y0 + (static_cast<double>(i) + 0.5) *
                     (b.height() / static_cast<double>(h))};
}

Tensor flip_back(const Tensor& map, bool flipped) {
  return flipped ? flip_horizontal(map) : map;
}

std::pair<RelBox, RelBox> intersection_relative(const ViewSpec& a,
                                                const ViewSpec& b) {
  const Box& ba = a.box;
  const Box& bb = b.box;
  const Box inter{std::max(ba.x0, bb.x0), std::max(ba.y0, bb.y0),
                  std::min(ba.x1, bb.x1), std::min(ba.y1, bb.y1)};
  if (!inter.valid()) {
    throw InvalidArgument("intersection_relative: views do not overlap");
  }
  auto rel = [&inter](const Box& v) {
    RelBox r{(inter.x0 - v.x0) / v.width(), (inter.y0 - v.y0) / v.height(),
             (inter.x1 - v.x0) / v.width(), (inter.y1 - v.y0) / v.height()};
    r.x0 = std::clamp(r.x0, 0.0, 1.0);
    r.y0 = std::clamp(r.y0, 0.0, 1.0);
    r.x1 = std::clamp(r.x1, 0.0, 1.0);
    r.y1 = std::clamp(r.y1, 0.0, 1.0);
    return r;
  };
  return {rel(ba), rel(bb)};
}

namespace {

struct Tap {
  std::size_t y0, y1, x0, x1;
  double fy, fx;
};

Tap make_tap(double y, double x, std::size_t h, std::size_t w) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  Tap t;
  t.y0 = static_cast<std::size_t>(std::floor(y));
  t.x0 = static_cast<std::size_t>(std::floor(x));
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.fy = y - static_cast<double>(t.y0);
  t.fx = x - static_cast<double>(t.x0);
  return t;
}

} // namespace

Tensor roi_align(const Tensor& map, const RelBox& roi, std::size_t out_h,
                 std::size_t out_w) {
  if (map.rank() != 3 || map.dim(1) == 0 || map.dim(2) == 0) {
    throw ShapeError("roi_align: expected non-empty [C,H,W], got " +
                     shape_string(map.shape()));
  }
  if (!roi.valid()) {
    throw InvalidArgument("roi_align: invalid relative box");
  }
  if (out_h == 0 || out_w == 0) {
    throw ShapeError("roi_align: empty output");
  }
  const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2);
  std::vector<Tap> taps(out_h * out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    // Written so that a full roi at native resolution lands exactly on
    // pixel centers.
    const double y = roi.y0 * static_cast<double>(h) +
                     (static_cast<double>(i) + 0.5) *
                         ((roi.y1 - roi.y0) * static_cast<double>(h) /
                          static_cast<double>(out_h)) -
                     0.5;
    for (std::size_t j = 0; j < out_w; ++j) {
      const double x = roi.x0 * static_cast<double>(w) +
                       (static_cast<double>(j) + 0.5) *
                           ((roi.x1 - roi.x0) * static_cast<double>(w) /
                            static_cast<double>(out_w)) -
                       0.5;
      taps[i * out_w + j] = make_tap(y, x, h, w);
    }
  }
  auto x = map.data();
  const std::size_t n = out_h * out_w;
  std::vector<double> out(c * n);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* p = x.data() + ch * h * w;
    for (std::size_t k = 0; k < n; ++k) {
      const Tap& t = taps[k];
      const double top = p[t.y0 * w + t.x0] * (1 - t.fx) + p[t.y0 * w + t.x1] * t.fx;
      const double bot = p[t.y1 * w + t.x0] * (1 - t.fx) + p[t.y1 * w + t.x1] * t.fx;
      out[ch * n + k] = top * (1 - t.fy) + bot * t.fy;
    }
  }
  auto pm = map.impl();
  return make_result({c, out_h, out_w}, std::move(out), {map},
                     [pm, taps = std::move(taps), c, h, w,
                      n](const TensorImpl& o) {
                       auto& g = pm->grad_buffer();
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         double* gp = g.data() + ch * h * w;
                         for (std::size_t k = 0; k < n; ++k) {
                           const Tap& t = taps[k];
                           const double go = o.grad[ch * n + k];
                           gp[t.y0 * w + t.x0] += go * (1 - t.fy) * (1 - t.fx);
                           gp[t.y0 * w + t.x1] += go * (1 - t.fy) * t.fx;
                           gp[t.y1 * w + t.x0] += go * t.fy * (1 - t.fx);
                           gp[t.y1 * w + t.x1] += go * t.fy * t.fx;
                         }
                       }
                     });
}

Tensor offset_map(const ViewSpec& a, const ViewSpec& b, std::size_t h,
                  std::size_t w, bool normalize) {
  if (h == 0 || w == 0) {
    throw ShapeError("offset_map: empty grid");
  }
  // Alignment runs on flip-backed maps, so both grids are read unflipped.
  ViewSpec ua = a, ub = b;
  ua.flipped = false;
  ub.flipped = false;
  double span_x = 1.0, span_y = 1.0;
  if (normalize) {
    const Point first = grid_coord(ua, 0, 0, h, w);
    const Point last = grid_coord(ua, h - 1, w - 1, h, w);
    span_x = last.x - first.x;
    span_y = last.y - first.y;
    // A single row/column has no span; fall back to the view extent.
    if (w == 1) span_x = a.box.width();
    if (h == 1) span_y = a.box.height();
  }
  std::vector<double> out(2 * h * w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const Point pa = grid_coord(ua, i, j, h, w);
      const Point pb = grid_coord(ub, i, j, h, w);
      out[i * w + j] = (pb.x - pa.x) / span_x;
      out[h * w + i * w + j] = (pb.y - pa.y) / span_y;
    }
  }
  return Tensor::from({2, h, w}, std::move(out));
}

AlignedPair align_pair(const Tensor& online, const Tensor& target,
                       const ViewSpec& a, const ViewSpec& b, AlignMode mode,
                       bool normalize_offset) {
  if (online.rank() != 3 || target.rank() != 3 ||
      online.dim(1) != target.dim(1) || online.dim(2) != target.dim(2)) {
    throw ShapeError("align_pair: spatial extents differ: " +
                     shape_string(online.shape()) + " vs " +
                     shape_string(target.shape()));
  }
  const std::size_t h = online.dim(1), w = online.dim(2);
  AlignedPair out;
  out.mode = mode;
  switch (mode) {
    case AlignMode::kNone:
      out.online = online;
      out.target = target;
      break;
    case AlignMode::kRoi: {
      const auto [ra, rb] = intersection_relative(a, b);
      out.online = roi_align(online, ra, h, w);
      out.target = roi_align(target, rb, h, w);
      break;
    }
    case AlignMode::kOffset:
      out.online = concat({online, offset_map(a, b, h, w, normalize_offset)}, 0);
      out.target = target;
      break;
  }
  return out;
}

Point aligned_cell_coord(const ViewSpec& spec, const RelBox& roi,
                         std::size_t i, std::size_t j, std::size_t h,
                         std::size_t w) {
  const double u = roi.x0 + (static_cast<double>(j) + 0.5) /
                                static_cast<double>(w) * (roi.x1 - roi.x0);
  const double v = roi.y0 + (static_cast<double>(i) + 0.5) /
                                static_cast<double>(h) * (roi.y1 - roi.y0);
  return {spec.box.x0 + u * spec.box.width(),
          spec.box.y0 + v * spec.box.height()};
}

} // namespace msiam

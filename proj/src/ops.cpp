#include "multisiam/ops.h"

#include <algorithm>
#include <cmath>

namespace msiam {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

void accumulate(const ImplPtr& target, const std::vector<double>& delta) {
  if (!target->requires_grad) {
    return;
  }
  auto& g = target->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] += delta[i];
  }
}

enum class Broadcast { kSame, kLeftScalar, kRightScalar };

Broadcast check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) {
    return Broadcast::kSame;
  }
  if (a.numel() == 1) {
    return Broadcast::kLeftScalar;
  }
  if (b.numel() == 1) {
    return Broadcast::kRightScalar;
  }
  throw ShapeError(std::string(op) + ": shape mismatch " +
                   shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

// Shared machinery for add/sub/mul with scalar broadcasting.
template <typename Fwd, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
              DA dfa, DB dfb) {
  const Broadcast mode = check_broadcast(a, b, name);
  const Shape out_shape =
      mode == Broadcast::kLeftScalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  auto av = a.data();
  auto bv = b.data();
  auto ia = [mode](std::size_t i) {
    return mode == Broadcast::kLeftScalar ? 0 : i;
  };
  auto ib = [mode](std::size_t i) {
    return mode == Broadcast::kRightScalar ? 0 : i;
  };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(av[ia(i)], bv[ib(i)]);
  }
  ImplPtr pa = a.impl();
  ImplPtr pb = b.impl();
  return make_result(out_shape, std::move(out), {a, b},
                     [pa, pb, mode, ia, ib, dfa, dfb, n](const TensorImpl& o) {
                       if (pa->requires_grad) {
                         auto& g = pa->grad_buffer();
                         for (std::size_t i = 0; i < n; ++i) {
                           g[ia(i)] += o.grad[i] *
                                       dfa(pa->data[ia(i)], pb->data[ib(i)]);
                         }
                       }
                       if (pb->requires_grad) {
                         auto& g = pb->grad_buffer();
                         for (std::size_t i = 0; i < n; ++i) {
                           g[ib(i)] += o.grad[i] *
                                       dfb(pa->data[ia(i)], pb->data[ib(i)]);
                         }
                       }
                     });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  const std::size_t n = a.numel();
  auto av = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(av[i]);
  }
  ImplPtr pa = a.impl();
  return make_result(a.shape(), std::move(out), {a},
                     [pa, deriv, n](const TensorImpl& o) {
                       auto& g = pa->grad_buffer();
                       for (std::size_t i = 0; i < n; ++i) {
                         g[i] += o.grad[i] * deriv(pa->data[i]);
                       }
                     });
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return factor * x; },
      [factor](double) { return factor; });
}

Tensor negate(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor solarize_threshold(const Tensor& a, double threshold) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) {
    if (v >= threshold) {
      v = 1.0 - v;
    }
  }
  return Tensor::from(a.shape(), std::move(out));
}

Tensor pointwise(PointwiseKind kind, const std::vector<Tensor>& inputs,
                 double param) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw InvalidArgument("pointwise: expected " + std::to_string(n) +
                            " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case PointwiseKind::kAdd:
      need(2);
      return add(inputs[0], inputs[1]);
    case PointwiseKind::kSub:
      need(2);
      return sub(inputs[0], inputs[1]);
    case PointwiseKind::kMul:
      need(2);
      return mul(inputs[0], inputs[1]);
    case PointwiseKind::kRelu:
      need(1);
      return relu(inputs[0]);
    case PointwiseKind::kScale:
      need(1);
      return scale(inputs[0], param);
    case PointwiseKind::kNegate:
      need(1);
      return negate(inputs[0]);
    case PointwiseKind::kSolarize:
      need(1);
      return solarize_threshold(inputs[0], param);
  }
  throw InvalidArgument("pointwise: unknown kind");
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) {
    s += v;
  }
  ImplPtr pa = a.impl();
  return make_result({}, {s}, {a}, [pa](const TensorImpl& o) {
    auto& g = pa->grad_buffer();
    for (double& v : g) {
      v += o.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) {
    throw ShapeError("mean of empty tensor");
  }
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw ShapeError("sum_axis: axis " + std::to_string(axis) +
                     " out of range for " + shape_string(a.shape()));
  }
  const Shape& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  auto av = a.data();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < len; ++k) {
      const double* src = av.data() + (o * len + k) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  ImplPtr pa = a.impl();
  return make_result(std::move(out_shape), std::move(out), {a},
                     [pa, outer, inner, len](const TensorImpl& o) {
                       auto& g = pa->grad_buffer();
                       for (std::size_t oo = 0; oo < outer; ++oo) {
                         for (std::size_t k = 0; k < len; ++k) {
                           double* dst = g.data() + (oo * len + k) * inner;
                           const double* src = o.grad.data() + oo * inner;
                           for (std::size_t i = 0; i < inner; ++i)
                             dst[i] += src[i];
                         }
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) +
                     " as " + shape_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  ImplPtr pa = a.impl();
  return make_result(std::move(shape), std::move(out), {a},
                     [pa](const TensorImpl& o) { accumulate(pa, o.grad); });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) {
    throw ShapeError("transpose: expected rank 2, got " +
                     shape_string(a.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto av = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  ImplPtr pa = a.impl();
  return make_result({n, m}, std::move(out), {a},
                     [pa, m, n](const TensorImpl& o) {
                       auto& g = pa->grad_buffer();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j)
                           g[i * n + j] += o.grad[j * m + i];
                     });
}

namespace {

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m,k] += g[m,n] * b[k,n]^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
      c[i * k + p] += s;
    }
  }
}

// c[k,n] += a[m,k]^T * g[m,n]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * gi[j];
    }
  }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) +
                     " and " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  ImplPtr pa = a.impl();
  ImplPtr pb = b.impl();
  return make_result({m, n}, std::move(out), {a, b},
                     [pa, pb, m, k, n](const TensorImpl& o) {
                       if (pa->requires_grad) {
                         gemm_nt(o.grad.data(), pb->data.data(),
                                 pa->grad_buffer().data(), m, n, k);
                       }
                       if (pb->requires_grad) {
                         gemm_tn(pa->data.data(), o.grad.data(),
                                 pb->grad_buffer().data(), m, k, n);
                       }
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) {
    throw InvalidArgument("concat: no inputs");
  }
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) {
    throw ShapeError("concat: axis out of range for " + shape_string(s0));
  }
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      ok = i == axis || s[i] == s0[i];
    }
    if (!ok) {
      throw ShapeError("concat: shape mismatch " + shape_string(s0) + " vs " +
                       shape_string(s));
    }
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::vector<ImplPtr> impls;
  std::vector<std::size_t> lens;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis];
    auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * len * inner, len * inner,
                  out.data() + (o * total + offset) * inner);
    }
    offset += len;
    impls.push_back(p.impl());
    lens.push_back(len);
  }
  return make_result(std::move(out_shape), std::move(out), parts,
                     [impls, lens, outer, inner, total](const TensorImpl& o) {
                       std::size_t off = 0;
                       for (std::size_t t = 0; t < impls.size(); ++t) {
                         const std::size_t len = lens[t];
                         if (impls[t]->requires_grad) {
                           auto& g = impls[t]->grad_buffer();
                           for (std::size_t oo = 0; oo < outer; ++oo) {
                             const double* src =
                                 o.grad.data() + (oo * total + off) * inner;
                             double* dst = g.data() + oo * len * inner;
                             for (std::size_t i = 0; i < len * inner; ++i)
                               dst[i] += src[i];
                           }
                         }
                         off += len;
                       }
                     });
}

Tensor conv2d(const Tensor& input, const Tensor& weight,
              const std::optional<Tensor>& bias, std::size_t stride,
              std::size_t pad) {
  if (input.rank() != 3 || weight.rank() != 4 ||
      weight.dim(1) != input.dim(0)) {
    throw ShapeError("conv2d: input " + shape_string(input.shape()) +
                     " incompatible with weight " +
                     shape_string(weight.shape()));
  }
  if (stride == 0) {
    throw InvalidArgument("conv2d: stride must be positive");
  }
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2),
                    kw = weight.dim(3);
  if ((kh != 1 && kh != 3) || (kw != 1 && kw != 3)) {
    throw ShapeError("conv2d: kernel extents must be 1 or 3, got " +
                     shape_string(weight.shape()));
  }
  if (h + 2 * pad < kh || w + 2 * pad < kw ||
      (h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0) {
    throw ShapeError("conv2d: non-integral output extent for input " +
                     shape_string(input.shape()) + ", kernel " +
                     std::to_string(kh) + "x" + std::to_string(kw) +
                     ", stride " + std::to_string(stride) + ", pad " +
                     std::to_string(pad));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
    throw ShapeError("conv2d: bias shape " + shape_string(bias->shape()) +
                     " does not match " + std::to_string(cout) + " channels");
  }
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;

  // Valid output range along one axis for kernel offset k.
  auto range = [stride, pad](std::size_t k, std::size_t in, std::size_t out) {
    // need 0 <= o*stride + k - pad < in
    std::ptrdiff_t lo = 0;
    const auto kp = static_cast<std::ptrdiff_t>(k) -
                    static_cast<std::ptrdiff_t>(pad);
    const auto s = static_cast<std::ptrdiff_t>(stride);
    while (lo < static_cast<std::ptrdiff_t>(out) && lo * s + kp < 0) ++lo;
    std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(out);
    while (hi > lo && (hi - 1) * s + kp >= static_cast<std::ptrdiff_t>(in))
      --hi;
    return std::pair<std::size_t, std::size_t>(lo, hi);
  };

  auto x = input.data();
  auto wt = weight.data();
  std::vector<double> out(cout * oh * ow, 0.0);
  if (bias) {
    auto bv = bias->data();
    for (std::size_t co = 0; co < cout; ++co)
      std::fill_n(out.data() + co * oh * ow, oh * ow, bv[co]);
  }
  for (std::size_t co = 0; co < cout; ++co) {
    double* o = out.data() + co * oh * ow;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* xi = x.data() + ci * h * w;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const auto [y0, y1] = range(ky, h, oh);
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double wv = wt[((co * cin + ci) * kh + ky) * kw + kx];
          if (wv == 0.0) continue;
          const auto [x0, x1] = range(kx, w, ow);
          for (std::size_t oy = y0; oy < y1; ++oy) {
            const double* row = xi + (oy * stride + ky - pad) * w;
            double* orow = o + oy * ow;
            for (std::size_t ox = x0; ox < x1; ++ox)
              orow[ox] += wv * row[ox * stride + kx - pad];
          }
        }
      }
    }
  }

  ImplPtr pin = input.impl();
  ImplPtr pw = weight.impl();
  ImplPtr pb = bias ? bias->impl() : nullptr;
  std::vector<Tensor> ins{input, weight};
  if (bias) ins.push_back(*bias);
  return make_result(
      {cout, oh, ow}, std::move(out), ins,
      [pin, pw, pb, cin, h, w, cout, kh, kw, oh, ow, stride, pad,
       range](const TensorImpl& o) {
        const double* go = o.grad.data();
        if (pb && pb->requires_grad) {
          auto& gb = pb->grad_buffer();
          for (std::size_t co = 0; co < cout; ++co) {
            double s = 0.0;
            for (std::size_t i = 0; i < oh * ow; ++i) s += go[co * oh * ow + i];
            gb[co] += s;
          }
        }
        const bool need_in = pin->requires_grad;
        const bool need_w = pw->requires_grad;
        double* gx = need_in ? pin->grad_buffer().data() : nullptr;
        double* gw = need_w ? pw->grad_buffer().data() : nullptr;
        const double* x = pin->data.data();
        const double* wt = pw->data.data();
        for (std::size_t co = 0; co < cout; ++co) {
          const double* g = go + co * oh * ow;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* xi = x + ci * h * w;
            double* gxi = need_in ? gx + ci * h * w : nullptr;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const auto [y0, y1] = range(ky, h, oh);
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::size_t widx = ((co * cin + ci) * kh + ky) * kw + kx;
                const double wv = wt[widx];
                const auto [x0, x1] = range(kx, w, ow);
                double acc = 0.0;
                for (std::size_t oy = y0; oy < y1; ++oy) {
                  const std::size_t off = (oy * stride + ky - pad) * w;
                  const double* grow = g + oy * ow;
                  if (need_w) {
                    const double* row = xi + off;
                    for (std::size_t ox = x0; ox < x1; ++ox)
                      acc += grow[ox] * row[ox * stride + kx - pad];
                  }
                  if (need_in && wv != 0.0) {
                    double* grow_in = gxi + off;
                    for (std::size_t ox = x0; ox < x1; ++ox)
                      grow_in[ox * stride + kx - pad] += wv * grow[ox];
                  }
                }
                if (need_w) gw[widx] += acc;
              }
            }
          }
        }
      });
}

Tensor pad2d(const Tensor& input, std::size_t top, std::size_t bottom,
             std::size_t left, std::size_t right, PadMode mode) {
  if (input.rank() != 3) {
    throw ShapeError("pad2d: expected [C,H,W], got " +
                     shape_string(input.shape()));
  }
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (mode == PadMode::kReplicate && (h == 0 || w == 0)) {
    throw ShapeError("pad2d: replicate padding of an empty map");
  }
  const std::size_t oh = h + top + bottom, ow = w + left + right;
  // Source pixel for every output position; npos marks a zero.
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  auto source = [&](std::size_t o, std::size_t lo, std::size_t n) {
    if (o >= lo && o - lo < n) return o - lo;
    if (mode == PadMode::kZero) return npos;
    return o < lo ? std::size_t{0} : n - 1;
  };
  std::vector<std::size_t> rows(oh), cols(ow);
  for (std::size_t i = 0; i < oh; ++i) rows[i] = source(i, top, h);
  for (std::size_t j = 0; j < ow; ++j) cols[j] = source(j, left, w);
  auto x = input.data();
  std::vector<double> out(c * oh * ow, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < oh; ++i) {
      if (rows[i] == npos) continue;
      const double* src = x.data() + (ch * h + rows[i]) * w;
      double* dst = out.data() + (ch * oh + i) * ow;
      for (std::size_t j = 0; j < ow; ++j)
        if (cols[j] != npos) dst[j] = src[cols[j]];
    }
  ImplPtr pa = input.impl();
  return make_result(
      {c, oh, ow}, std::move(out), {input},
      [pa, c, h, w, oh, ow, rows = std::move(rows),
       cols = std::move(cols)](const TensorImpl& o) {
        auto& g = pa->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < oh; ++i) {
            if (rows[i] == npos) continue;
            const double* src = o.grad.data() + (ch * oh + i) * ow;
            double* dst = g.data() + (ch * h + rows[i]) * w;
            for (std::size_t j = 0; j < ow; ++j)
              if (cols[j] != npos) dst[cols[j]] += src[j];
          }
      });
}

Tensor global_avg_pool(const Tensor& input) {
  if (input.rank() != 3 || input.dim(1) == 0 || input.dim(2) == 0) {
    throw ShapeError("global_avg_pool: expected non-empty [C,H,W], got " +
                     shape_string(input.shape()));
  }
  const std::size_t c = input.dim(0), hw = input.dim(1) * input.dim(2);
  auto x = input.data();
  std::vector<double> out(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += x[ch * hw + i];
    out[ch] = s / static_cast<double>(hw);
  }
  ImplPtr pa = input.impl();
  return make_result({c}, std::move(out), {input},
                     [pa, c, hw](const TensorImpl& o) {
                       auto& g = pa->grad_buffer();
                       const double inv = 1.0 / static_cast<double>(hw);
                       for (std::size_t ch = 0; ch < c; ++ch)
                         for (std::size_t i = 0; i < hw; ++i)
                           g[ch * hw + i] += o.grad[ch] * inv;
                     });
}

Tensor standardize(const Tensor& v, std::size_t axis, double eps) {
  if (!(eps > 0.0)) {
    throw InvalidArgument("standardize: eps must be positive");
  }
  if (axis >= v.rank()) {
    throw ShapeError("standardize: axis " + std::to_string(axis) +
                     " out of range for " + shape_string(v.shape()));
  }
  const Shape& s = v.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const double n = static_cast<double>(len);
  auto x = v.data();
  std::vector<double> out(x.size());
  std::vector<double> inv_std(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      double mu = 0.0, var = 0.0;
      for (std::size_t k = 0; k < len; ++k) mu += x[(o * len + k) * inner + i];
      mu /= n;
      for (std::size_t k = 0; k < len; ++k) {
        const double d = x[(o * len + k) * inner + i] - mu;
        var += d * d;
      }
      const double r = 1.0 / std::sqrt(var / n + eps);
      inv_std[o * inner + i] = r;
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t at = (o * len + k) * inner + i;
        out[at] = (x[at] - mu) * r;
      }
    }
  }
  ImplPtr pa = v.impl();
  std::vector<double> y = out;
  return make_result(
      s, std::move(out), {v},
      [pa, y = std::move(y), inv_std = std::move(inv_std), outer, inner, len,
       n](const TensorImpl& o) {
        auto& g = pa->grad_buffer();
        for (std::size_t oo = 0; oo < outer; ++oo) {
          for (std::size_t i = 0; i < inner; ++i) {
            // dx = (dy - mean(dy) - y mean(dy y)) / sigma
            double mg = 0.0, mgy = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
              const std::size_t at = (oo * len + k) * inner + i;
              mg += o.grad[at];
              mgy += o.grad[at] * y[at];
            }
            mg /= n;
            mgy /= n;
            const double r = inv_std[oo * inner + i];
            for (std::size_t k = 0; k < len; ++k) {
              const std::size_t at = (oo * len + k) * inner + i;
              g[at] += (o.grad[at] - mg - y[at] * mgy) * r;
            }
          }
        }
      });
}

Tensor l2_normalize(const Tensor& v, std::size_t axis, double eps) {
  if (!(eps > 0.0)) {
    throw InvalidArgument("l2_normalize: eps must be positive");
  }
  if (axis >= v.rank()) {
    throw ShapeError("l2_normalize: axis " + std::to_string(axis) +
                     " out of range for " + shape_string(v.shape()));
  }
  const Shape& s = v.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  auto x = v.data();
  std::vector<double> out(x.size());
  // denominators, and whether the norm was clamped at eps
  std::vector<double> denom(outer * inner);
  std::vector<char> clamped(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      double ss = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = x[(o * len + k) * inner + i];
        ss += e * e;
      }
      const double norm = std::sqrt(ss);
      const std::size_t idx = o * inner + i;
      clamped[idx] = norm <= eps;
      denom[idx] = clamped[idx] ? eps : norm;
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t at = (o * len + k) * inner + i;
        out[at] = x[at] / denom[idx];
      }
    }
  }
  ImplPtr pa = v.impl();
  std::vector<double> y = out;
  return make_result(
      s, std::move(out), {v},
      [pa, y = std::move(y), denom = std::move(denom),
       clamped = std::move(clamped), outer, inner, len](const TensorImpl& o) {
        auto& g = pa->grad_buffer();
        for (std::size_t oo = 0; oo < outer; ++oo) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t idx = oo * inner + i;
            const double d = denom[idx];
            // d y / d x = (I - y y^T) / ||x|| unless clamped, then I / eps.
            double dot = 0.0;
            if (!clamped[idx]) {
              for (std::size_t k = 0; k < len; ++k) {
                const std::size_t at = (oo * len + k) * inner + i;
                dot += o.grad[at] * y[at];
              }
            }
            for (std::size_t k = 0; k < len; ++k) {
              const std::size_t at = (oo * len + k) * inner + i;
              g[at] += (o.grad[at] - dot * y[at]) / d;
            }
          }
        }
      });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps) {
  if (a.rank() != 1 || a.shape() != b.shape() || a.numel() == 0) {
    throw ShapeError("cosine_similarity: expected equal non-empty vectors, "
                     "got " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  return sum(mul(l2_normalize(a, 0, eps), l2_normalize(b, 0, eps)));
}

Tensor flip_horizontal(const Tensor& map) {
  if (map.rank() != 3) {
    throw ShapeError("flip_horizontal: expected [C,H,W], got " +
                     shape_string(map.shape()));
  }
  const std::size_t rows = map.dim(0) * map.dim(1), w = map.dim(2);
  auto x = map.data();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = x[r * w + (w - 1 - j)];
  ImplPtr pa = map.impl();
  return make_result(map.shape(), std::move(out), {map},
                     [pa, rows, w](const TensorImpl& o) {
                       auto& g = pa->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < w; ++j)
                           g[r * w + (w - 1 - j)] += o.grad[r * w + j];
                     });
}

Tensor logsumexp_rows(const Tensor& a) {
  if (a.rank() != 2 || a.dim(1) == 0) {
    throw ShapeError("logsumexp_rows: expected [m,n>0], got " +
                     shape_string(a.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto x = a.data();
  std::vector<double> out(m);
  std::vector<double> soft(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      soft[i * n + j] = std::exp(row[j] - mx);
      s += soft[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) soft[i * n + j] /= s;
    out[i] = mx + std::log(s);
  }
  ImplPtr pa = a.impl();
  return make_result({m}, std::move(out), {a},
                     [pa, soft = std::move(soft), m, n](const TensorImpl& o) {
                       auto& g = pa->grad_buffer();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j)
                           g[i * n + j] += o.grad[i] * soft[i * n + j];
                     });
}

} // namespace msiam

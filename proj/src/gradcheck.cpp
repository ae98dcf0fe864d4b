#include "multisiam/gradcheck.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "multisiam/ops.h"

namespace msiam {

namespace {

// Deterministic projection weights in [0.5, 1.5) so no coordinate of the
// output is ignored.
std::vector<double> projection_weights(std::size_t n) {
  std::vector<double> w(n);
  std::uint64_t s = 0x9e3779b97f4a7c15ULL;
  for (auto& v : w) {
    s ^= s << 13;
    s ^= s >> 7;
    s ^= s << 17;
    v = 0.5 + static_cast<double>(s >> 11) * 0x1.0p-53;
  }
  return w;
}

Tensor reduce_to_scalar(const Tensor& out) {
  if (out.numel() == 1) {
    return out.rank() == 0 ? out : reshape(out, {});
  }
  auto w = Tensor::from(out.shape(), projection_weights(out.numel()));
  return sum(mul(out, w));
}

double eval_scalar(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  const double v = reduce_to_scalar(f()).item();
  if (!std::isfinite(v)) {
    throw NumericError("finite_difference_check: function value is not finite");
  }
  return v;
}

GradCheckReport compare(const std::string& op_name,
                        const std::function<Tensor()>& f,
                        std::vector<Tensor>& params, double h) {
  if (!(h > 0.0)) {
    throw InvalidArgument("finite_difference_check: h must be positive");
  }
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.clear_grad();
  }
  Tensor loss = reduce_to_scalar(f());
  if (!std::isfinite(loss.item())) {
    throw NumericError("finite_difference_check: function value is not finite");
  }
  // Below this magnitude the stencil's rounding noise (about eps |f| / h)
  // would dominate, so differences there are measured against the floor.
  const double floor =
      std::max(1e-8, 1e5 * std::numeric_limits<double>::epsilon() *
                         std::max(std::abs(loss.item()), 1.0) / h);
  loss.backward();

  GradCheckReport report;
  report.op_name = op_name;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& p = params[t];
    const std::vector<double> analytic =
        p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                     : std::vector<double>(p.numel(), 0.0);
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double x0 = data[i];
      auto at = [&](double delta) {
        data[i] = x0 + delta;
        const double v = eval_scalar(f);
        data[i] = x0;
        return v;
      };
      // Fourth-order central stencil, grouped as differences so that equal
      // function values cancel exactly.
      const double d1 = at(h) - at(-h);
      const double d2 = at(2 * h) - at(-2 * h);
      const double numeric = (8 * d1 - d2) / (12 * h);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      if (!std::isfinite(rel)) {
        throw NumericError("finite_difference_check: non-finite gradient in " +
                           op_name);
      }
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_input = t;
        report.worst_index = i;
      }
      ++report.coordinates;
    }
  }
  return report;
}

} // namespace

GradCheckReport finite_difference_check(const std::string& op_name,
                                        const TensorFunction& f,
                                        std::vector<Tensor> inputs, double h) {
  std::vector<Tensor> params = inputs;
  return compare(
      op_name, [&f, &inputs]() { return f(inputs); }, params, h);
}

GradCheckReport finite_difference_check_params(
    const std::string& op_name, const std::function<Tensor()>& loss,
    std::vector<Tensor> params, double h) {
  return compare(op_name, loss, params, h);
}

} // namespace msiam

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "multisiam/tensor.h"

namespace msiam {

struct GradCheckReport {
  std::string op_name;
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

using TensorFunction = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares backward() grads of `f` at `inputs` against a fourth-order
/// central-difference estimate with step `h`. Non-scalar outputs are reduced
/// with a fixed pseudo-random projection first. Relative error per coordinate
/// is |analytic - numeric| / max(|analytic|, |numeric|, floor), where
/// floor = max(1e-8, 1e5 * eps * max(|f|, 1) / h) sits at the magnitude below
/// which finite-difference rounding noise dominates.
///
/// Every input is checked; inputs are treated as leaves (their requires_grad
/// is forced on for the duration). Throws NumericError if f produces
/// non-finite values.
GradCheckReport finite_difference_check(const std::string& op_name,
                                        const TensorFunction& f,
                                        std::vector<Tensor> inputs,
                                        double h = 1e-5);

/// Gradient check over an explicit parameter list: `loss` is re-evaluated
/// after perturbing each parameter coordinate in place.
GradCheckReport finite_difference_check_params(
    const std::string& op_name, const std::function<Tensor()>& loss,
    std::vector<Tensor> params, double h = 1e-5);

} // namespace msiam

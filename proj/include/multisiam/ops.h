#pragma once

#include <optional>
#include <vector>

#include "multisiam/tensor.h"

namespace msiam {

// Elementwise arithmetic. Broadcasting is restricted to identical shapes or
// a single-element operand on either side; anything else throws ShapeError
// naming both shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor negate(const Tensor& a);
/// relu(x) = max(x, 0); subgradient at 0 is 0.
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
/// x < threshold ? x : 1 - x. Not differentiable, never records a graph.
Tensor solarize_threshold(const Tensor& a, double threshold = 0.5);

enum class PointwiseKind { kAdd, kSub, kMul, kRelu, kScale, kNegate, kSolarize };

/// Dispatcher over the pointwise kinds. `param` is the scale factor or the
/// solarize threshold; binary kinds take exactly two inputs.
Tensor pointwise(PointwiseKind kind, const std::vector<Tensor>& inputs,
                 double param = 0.0);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sums out `axis`; the result drops that axis.
Tensor sum_axis(const Tensor& a, std::size_t axis);

Tensor reshape(const Tensor& a, Shape shape);
/// Transpose of a rank-2 tensor.
Tensor transpose(const Tensor& a);
/// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// Concatenation along `axis`; all other extents must agree.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

/// Cross-correlation of input [C_in,H,W] with weight [C_out,C_in,kh,kw],
/// plus an optional per-output-channel bias [C_out].
Tensor conv2d(const Tensor& input, const Tensor& weight,
              const std::optional<Tensor>& bias, std::size_t stride,
              std::size_t pad);

enum class PadMode { kZero, kReplicate };

/// Pads the spatial axes of a [C,H,W] map with zeros or copies of the
/// nearest edge value.
Tensor pad2d(const Tensor& input, std::size_t top, std::size_t bottom,
             std::size_t left, std::size_t right,
             PadMode mode = PadMode::kZero);

/// [C,H,W] -> [C] per-channel mean.
Tensor global_avg_pool(const Tensor& input);

/// v / max(||v||_2, eps) along `axis`.
Tensor l2_normalize(const Tensor& v, std::size_t axis, double eps = 1e-12);

/// (v - mean) / sqrt(var + eps) along `axis` (population variance, no
/// learned affine).
Tensor standardize(const Tensor& v, std::size_t axis, double eps = 1e-5);

/// <a,b> / (max(||a||,eps) max(||b||,eps)) for rank-1 a, b. Returns a scalar.
Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-12);

/// Mirrors the last axis of a [C,H,W] map.
Tensor flip_horizontal(const Tensor& map);

/// Row-wise log-sum-exp of a rank-2 tensor: [m,n] -> [m].
Tensor logsumexp_rows(const Tensor& a);

} // namespace msiam

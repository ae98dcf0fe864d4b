#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "multisiam/error.h"

namespace msiam {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct TensorImpl;

/// Backward closure of a recorded operation. Receives the finished output
/// (data + accumulated grad) and must add its contribution into the grads of
/// the inputs it captured.
using BackwardFn = std::function<void(const TensorImpl& out)>;

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad; // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node; // null for leaves and for detached results

  /// Returns the grad buffer, allocating zeros on first use.
  std::vector<double>& grad_buffer();
};

/// Dense row-major double tensor participating in a reverse-mode graph.
///
/// Tensors are handles: copying a Tensor shares storage. Results of recorded
/// operations hold their inputs alive through the graph until backward() runs,
/// after which the graph is released.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Mutable access for leaves (parameters, inputs). Mutating a tensor that
  /// is part of a live graph invalidates that graph's gradients.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  /// Drops the grad buffer entirely (has_grad() becomes false).
  void clear_grad();

  /// Same storage, cut from the graph, requires_grad = false.
  Tensor detach() const;
  /// Deep copy of the data; never shares storage or graph.
  Tensor clone() const;

  /// Reverse-mode sweep from this scalar. Throws ShapeError when non-scalar.
  void backward() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// True while operations record differentiation graphs on this thread.
bool grad_enabled();

/// Disables graph recording for its lifetime (used for the target network,
/// clustering targets and evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds an operation result. When grad recording is on and any input
/// requires grad, the result records `backward` against `inputs`.
Tensor make_result(Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, BackwardFn backward);

} // namespace msiam

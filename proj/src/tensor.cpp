#include "multisiam/tensor.h"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace msiam {

namespace {
thread_local bool g_grad_enabled = true;
} // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.empty() && !data.empty()) {
    grad.assign(data.size(), 0.0);
  }
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_string(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("Tensor::dim: axis " + std::to_string(axis) +
                     " out of range for shape " + shape_string(shape()));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("Tensor::item on shape " + shape_string(shape()));
  }
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() { return impl_->grad_buffer(); }

void Tensor::zero_grad() {
  if (has_grad()) {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
}

void Tensor::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     shape_string(shape()));
  }
  if (!impl_->requires_grad) {
    return;
  }

  // Iterative post-order DFS; reversed post-order is a topological order.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->node && next < t->node->inputs.size()) {
      TensorImpl* child = t->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  impl_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (t->node && t->node->backward) {
      t->grad_buffer();
      t->node->backward(*t);
    }
  }
  // Free the tape: intermediates drop their closures and inputs.
  for (TensorImpl* t : order) {
    t->node.reset();
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, BackwardFn backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (impl->data.size() != shape_numel(impl->shape)) {
    throw ShapeError("make_result: data size does not match shape " +
                     shape_string(impl->shape));
  }
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) {
      needs = needs || (in.defined() && in.requires_grad());
    }
  }
  if (needs) {
    impl->requires_grad = true;
    auto node = std::make_shared<Node>();
    for (const auto& in : inputs) {
      if (in.defined()) {
        node->inputs.push_back(in.impl());
      }
    }
    node->backward = std::move(backward);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

} // namespace msiam

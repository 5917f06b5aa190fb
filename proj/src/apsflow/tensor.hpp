#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>

#include "apsflow/common.hpp"

namespace apsflow {

// Dense row-major tensor with reverse-mode autodiff.
//
// Values are immutable once a tensor participates in an op; only grad buffers
// accumulate. Two precisions are supported via the template parameter:
// double for gradient checks and property tests, float for training.

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first needed
  bool requires_grad = false;

  T* ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    APSFLOW_CHECK(shape_numel(shape) == static_cast<int64_t>(data.size()), ShapeError,
                  "tensor data length " << data.size() << " does not match shape "
                                        << shape_str(shape));
    impl_ = std::make_shared<TensorImpl<T>>();
    impl_->shape = std::move(shape);
    impl_->value = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor({1}, std::vector<T>{v}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[i]; }
  int64_t size() const { return static_cast<int64_t>(impl_->value.size()); }

  const std::vector<T>& value() const { return impl_->value; }
  const T* data() const { return impl_->value.data(); }

  // Mutable access for builders (weight init, data loading). Mutating a
  // tensor that already sits on a tape is undefined.
  std::vector<T>& raw_value() { return impl_->value; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<T>& grad() const {
    APSFLOW_CHECK(has_grad(), ContractError, "tensor has no gradient populated");
    return impl_->grad;
  }
  std::vector<T>& mutable_grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  T item() const {
    APSFLOW_CHECK(size() == 1, ContractError,
                  "item() requires a scalar tensor, got shape " << shape_str(shape()));
    return impl_->value[0];
  }

  bool same_shape(const Tensor& other) const { return impl_->shape == other.impl_->shape; }

  std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// Ordered record of executed ops. Replaying it back-to-front visits each
// needed node exactly once in reverse topological order (ops are appended
// only after their inputs exist).
template <typename T>
class GradientTape {
 public:
  struct Node {
    const char* op;
    std::shared_ptr<TensorImpl<T>> output;
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    // Receives the output impl (grad populated) and accumulates into the
    // grads of inputs that require grad. ensure_grad() on those inputs is
    // the closure's job.
    std::function<void(TensorImpl<T>&)> backward;
  };

  static GradientTape*& active() {
    static thread_local GradientTape* tape = nullptr;
    return tape;
  }

  void record(Node n) { nodes_.push_back(std::move(n)); }
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void backward(const Tensor<T>& root) {
    APSFLOW_CHECK(root.size() == 1, ContractError,
                  "backward() root must be scalar, got shape " << shape_str(root.shape()));
    auto root_impl = root.impl();

    std::unordered_set<TensorImpl<T>*> needed;
    needed.insert(root_impl.get());
    std::vector<const Node*> to_run;
    to_run.reserve(nodes_.size());
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!needed.count(it->output.get())) continue;
      to_run.push_back(&*it);
      for (const auto& in : it->inputs) {
        if (in->requires_grad) needed.insert(in.get());
      }
    }
    // Node outputs are intermediates: their grads are scratch for this call,
    // while leaf grads accumulate across calls.
    for (const Node* n : to_run) {
      n->output->ensure_grad();
      std::fill(n->output->grad.begin(), n->output->grad.end(), T(0));
    }
    root_impl->ensure_grad();
    root_impl->grad[0] += T(1);
    for (const Node* n : to_run) n->backward(*n->output);
  }

 private:
  std::vector<Node> nodes_;
};

// RAII activation. Ops record onto the active tape only.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(GradientTape<T>& tape) : prev_(GradientTape<T>::active()) {
    GradientTape<T>::active() = &tape;
  }
  ~TapeScope() { GradientTape<T>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradientTape<T>* prev_;
};

template <typename T>
class NoGradScope {
 public:
  NoGradScope() : prev_(GradientTape<T>::active()) { GradientTape<T>::active() = nullptr; }
  ~NoGradScope() { GradientTape<T>::active() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradientTape<T>* prev_;
};

// When on, every op output is scanned for non-finite values and reported
// with the op name. Used by the finite-difference harness; too costly to
// leave on for training.
inline bool& finite_check_mode() {
  static thread_local bool on = false;
  return on;
}

namespace detail {

template <typename T>
inline void check_finite_output(const char* op, const std::vector<T>& v) {
  if (!finite_check_mode()) return;
  for (size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(static_cast<double>(v[i]))) {
      throw NumericError(std::string("non-finite value in output of op '") + op +
                         "' at flat index " + std::to_string(i));
    }
  }
}

// Builds the op result and records a tape node when gradients are needed.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(TensorImpl<T>&)> backward) {
  check_finite_output(op, value);
  bool needs = false;
  auto* tape = GradientTape<T>::active();
  if (tape) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) {
        needs = true;
        break;
      }
    }
  }
  Tensor<T> out(std::move(shape), std::move(value), needs);
  if (needs) {
    typename GradientTape<T>::Node node;
    node.op = op;
    node.output = out.impl();
    node.inputs.reserve(inputs.size());
    for (const auto& in : inputs) node.inputs.push_back(in.impl());
    node.backward = std::move(backward);
    tape->record(std::move(node));
  }
  return out;
}

}  // namespace detail

using detail::make_result;

}  // namespace apsflow

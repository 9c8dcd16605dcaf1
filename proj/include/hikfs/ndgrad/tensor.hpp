#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hikfs/error.hpp"

namespace hikfs::nd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

struct TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;
using BackwardFn = std::function<void(TensorImpl&)>;

/// Storage plus the graph edge that produced it. `parents` and `backward_fn`
/// are set only on op results that require grad.
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool from_op = false;
  bool consumed = false;
  std::vector<ImplPtr> parents;
  BackwardFn backward_fn;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major float64 tensor. Copies share storage (handle semantics);
/// use detach() for an independent value copy.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl>()) {
    if (numel_of(shape) != data.size()) {
      throw ShapeError("Tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(numel_of(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value) {
    auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }
  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values), requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    std::vector<double> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("Tensor::matrix: ragged rows");
      values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// Direct write access for in-place state updates (memory slots, optimizer
  /// steps). Writes are never recorded on the graph.
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return impl_->data[0];
  }
  double at(std::size_t i) const { return impl_->data.at(i); }
  double at(std::size_t r, std::size_t c) const {
    if (rank() != 2) throw ShapeError("at(r, c): tensor is not a matrix");
    return impl_->data.at(r * impl_->shape[1] + c);
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) {
    if (impl_->from_op) throw GraphError("set_requires_grad: only leaf tensors can change requires_grad");
    impl_->requires_grad = on;
  }
  bool is_leaf() const { return !impl_->from_op; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }

  /// Value copy with no graph attached.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data, false); }

  const ImplPtr& impl() const { return impl_; }

 private:
  ImplPtr impl_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Creates an op result, recording a graph node when grad mode is on and
/// any input requires grad.
inline Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                          BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  auto& impl = *out.impl();
  impl.requires_grad = true;
  impl.from_op = true;
  impl.parents.reserve(inputs.size());
  for (const auto& t : inputs) impl.parents.push_back(t.impl());
  impl.backward_fn = std::move(fn);
  return out;
}

inline Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                          BackwardFn fn) {
  return make_result(std::move(shape), std::move(data), std::vector<Tensor>(inputs), std::move(fn));
}

/// Reverse-mode pass from a scalar loss. Gradients accumulate into every
/// reachable tensor that requires grad; the graph is released afterwards, so
/// a second call on the same loss is an error.
inline void backward(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward: undefined loss tensor");
  if (loss.numel() != 1) {
    throw GraphError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  TensorImpl* root = loss.impl().get();
  if (root->consumed) {
    throw GraphError("backward: graph already differentiated; rebuild the forward pass first");
  }
  if (!root->requires_grad) throw GraphError("backward: loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS gives a deterministic topological order.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* parent = node->parents[next++].get();
      if (parent->requires_grad && !seen.count(parent)) {
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }

  for (TensorImpl* node : order) {
    for (double g : node->grad) {
      if (!std::isfinite(g)) throw NumericError("backward: non-finite gradient encountered");
    }
  }
  // Parents are moved out first so no node in `order` is freed mid-loop.
  std::vector<std::shared_ptr<TensorImpl>> released;
  for (TensorImpl* node : order) {
    if (node->from_op) {
      node->backward_fn = nullptr;
      for (auto& p : node->parents) released.push_back(std::move(p));
      node->parents.clear();
      node->consumed = true;
    }
  }
}

}  // namespace hikfs::nd

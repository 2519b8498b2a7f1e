#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "dkd/errors.hpp"

namespace dkd {

// Element type of a tensor buffer. Training runs in f32; gradient
// verification runs in f64.
enum class Dtype : std::uint8_t { f32, f64 };

std::string_view to_string(Dtype dtype);

// Dtype used for tensors created without an explicit dtype on this thread.
Dtype default_dtype();

// RAII switch of the thread's numeric mode.
class PrecisionScope {
 public:
  explicit PrecisionScope(Dtype dtype);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Dtype previous_;
};

bool grad_enabled();

// Disables op recording on this thread while alive.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool previous_;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor;

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  Dtype dtype = Dtype::f32;
  std::vector<float> data32;
  std::vector<double> data64;
  std::vector<float> grad32;
  std::vector<double> grad64;
  bool has_grad = false;
  bool requires_grad = false;
  std::shared_ptr<Node> producer;

  template <class T>
  std::vector<T>& values() {
    if constexpr (std::is_same_v<T, float>) {
      return data32;
    } else {
      return data64;
    }
  }

  template <class T>
  std::vector<T>& grads() {
    if constexpr (std::is_same_v<T, float>) {
      return grad32;
    } else {
      return grad64;
    }
  }

  // Allocates a zeroed gradient buffer on first use.
  template <class T>
  std::vector<T>& grad_buffer() {
    auto& g = grads<T>();
    if (!has_grad) {
      g.assign(shape_numel(shape), T{0});
      has_grad = true;
    }
    return g;
  }
};

}  // namespace detail

// Dense row-major n-dimensional array. Copies are cheap handles sharing one
// buffer; values are treated as immutable once an op has produced them.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, Dtype dtype, bool requires_grad = false);
  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return zeros(shape, default_dtype(), requires_grad);
  }
  static Tensor full(const Shape& shape, double value, Dtype dtype);
  static Tensor full(const Shape& shape, double value) { return full(shape, value, default_dtype()); }
  // Values are converted to `dtype`.
  static Tensor from(const Shape& shape, std::span<const double> values, Dtype dtype,
                     bool requires_grad = false);
  static Tensor from(const Shape& shape, std::span<const double> values, bool requires_grad = false) {
    return from(shape, values, default_dtype(), requires_grad);
  }
  static Tensor from(const Shape& shape, std::span<const float> values, bool requires_grad = false);
  static Tensor scalar(double value) { return full({1}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  Dtype dtype() const;

  template <class T>
  std::span<const T> values() const {
    check_dtype<T>();
    return impl_->values<T>();
  }
  // Write access for parameter updates and initialization.
  template <class T>
  std::span<T> mutable_values() {
    check_dtype<T>();
    return impl_->values<T>();
  }

  double at(std::size_t flat_index) const;
  std::vector<double> to_vector() const;
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::vector<double> grad_vector() const;
  template <class T>
  std::span<const T> grad_values() const {
    check_dtype<T>();
    return impl_->grads<T>();
  }
  void zero_grad();

  // Copy of the values with no history and no gradient.
  Tensor detach() const;
  // Copy converted to another dtype, no history.
  Tensor to(Dtype dtype) const;

  bool same_buffer(const Tensor& other) const { return impl_ == other.impl_; }
  detail::TensorImpl& impl() const;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  template <class T>
  void check_dtype() const {
    const Dtype want = std::is_same_v<T, float> ? Dtype::f32 : Dtype::f64;
    if (impl().dtype != want) {
      throw ParameterError("tensor dtype is " + std::string(to_string(impl_->dtype)) +
                           ", requested " + std::string(to_string(want)));
    }
  }

  std::shared_ptr<detail::TensorImpl> impl_;
  friend Tensor make_tensor(const Shape& shape, Dtype dtype);
};

// Fresh zero tensor with no history; used by op kernels.
Tensor make_tensor(const Shape& shape, Dtype dtype);

namespace detail {

struct Node {
  std::uint64_t seq = 0;
  std::string op;
  std::vector<Tensor> inputs;
  TensorImpl* output = nullptr;  // owner of this node
  std::function<void()> backward;
};

// Attaches a backward rule to `out` when recording is on and any input
// requires grad.
void record(Tensor& out, std::string_view op, std::vector<Tensor> inputs,
            std::function<void()> backward);

// Gradient buffer of `t` when it participates in differentiation, else null.
template <class T>
std::vector<T>* grad_sink(const Tensor& t) {
  auto& impl = t.impl();
  if (!impl.requires_grad) {
    return nullptr;
  }
  return &impl.grad_buffer<T>();
}

template <class F>
decltype(auto) dispatch(Dtype dtype, F&& fn) {
  if (dtype == Dtype::f32) {
    return fn(float{});
  }
  return fn(double{});
}

}  // namespace detail

// Recorded operations reachable from a root, in creation order. Creation
// order is topological: an op's inputs always exist before the op runs.
class Tape {
 public:
  static Tape from_root(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<const detail::Node*>& nodes() const { return nodes_; }
  bool is_topological() const;

 private:
  std::vector<const detail::Node*> nodes_;
};

// Populates grad on every requires_grad ancestor of a scalar root.
void backward(const Tensor& root);

}  // namespace dkd

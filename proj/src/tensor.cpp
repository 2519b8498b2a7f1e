#include "dkd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace dkd {

namespace {

thread_local Dtype t_dtype = Dtype::f32;
thread_local bool t_grad_enabled = true;
std::atomic<std::uint64_t> g_next_seq{1};

}  // namespace

std::string_view to_string(Dtype dtype) { return dtype == Dtype::f32 ? "f32" : "f64"; }

Dtype default_dtype() { return t_dtype; }

PrecisionScope::PrecisionScope(Dtype dtype) : previous_(t_dtype) { t_dtype = dtype; }
PrecisionScope::~PrecisionScope() { t_dtype = previous_; }

bool grad_enabled() { return t_grad_enabled; }

NoGradScope::NoGradScope() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradScope::~NoGradScope() { t_grad_enabled = previous_; }

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
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor make_tensor(const Shape& shape, Dtype dtype) {
  if (shape.empty()) {
    throw ShapeError("tensor shape must have at least one dimension");
  }
  for (auto d : shape) {
    if (d == 0) {
      throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
    }
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->dtype = dtype;
  if (dtype == Dtype::f32) {
    impl->data32.assign(shape_numel(shape), 0.0f);
  } else {
    impl->data64.assign(shape_numel(shape), 0.0);
  }
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(const Shape& shape, Dtype dtype, bool requires_grad) {
  Tensor t = make_tensor(shape, dtype);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(const Shape& shape, double value, Dtype dtype) {
  Tensor t = make_tensor(shape, dtype);
  detail::dispatch(dtype, [&]<class T>(T) {
    auto& v = t.impl_->values<T>();
    std::fill(v.begin(), v.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from(const Shape& shape, std::span<const double> values, Dtype dtype,
                    bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_string(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  Tensor t = make_tensor(shape, dtype);
  detail::dispatch(dtype, [&]<class T>(T) {
    auto& v = t.impl_->values<T>();
    std::transform(values.begin(), values.end(), v.begin(), [](double x) { return static_cast<T>(x); });
  });
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from(const Shape& shape, std::span<const float> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_string(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  Tensor t = make_tensor(shape, Dtype::f32);
  std::copy(values.begin(), values.end(), t.impl_->data32.begin());
  t.impl_->requires_grad = requires_grad;
  return t;
}

detail::TensorImpl& Tensor::impl() const {
  if (!impl_) {
    throw ParameterError("use of an undefined tensor");
  }
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw RankError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(s.size()));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

Dtype Tensor::dtype() const { return impl().dtype; }

double Tensor::at(std::size_t i) const {
  auto& im = impl();
  if (i >= numel()) {
    throw ShapeError("flat index " + std::to_string(i) + " out of range for " + shape_string(im.shape));
  }
  return im.dtype == Dtype::f32 ? static_cast<double>(im.data32[i]) : im.data64[i];
}

std::vector<double> Tensor::to_vector() const {
  auto& im = impl();
  if (im.dtype == Dtype::f64) {
    return im.data64;
  }
  return {im.data32.begin(), im.data32.end()};
}

double Tensor::item() const {
  if (numel() != 1) {
    throw RankError("item() needs a single-element tensor, got " + shape_string(shape()));
  }
  return at(0);
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (impl().producer) {
    throw ParameterError("requires_grad can only be set on leaf tensors");
  }
  impl_->requires_grad = flag;
}

bool Tensor::has_grad() const { return impl().has_grad; }

std::vector<double> Tensor::grad_vector() const {
  auto& im = impl();
  if (!im.has_grad) {
    return std::vector<double>(numel(), 0.0);
  }
  if (im.dtype == Dtype::f64) {
    return im.grad64;
  }
  return {im.grad32.begin(), im.grad32.end()};
}

void Tensor::zero_grad() {
  auto& im = impl();
  im.has_grad = false;
  im.grad32.clear();
  im.grad64.clear();
}

Tensor Tensor::detach() const {
  auto& im = impl();
  Tensor t = make_tensor(im.shape, im.dtype);
  t.impl_->data32 = im.data32;
  t.impl_->data64 = im.data64;
  return t;
}

Tensor Tensor::to(Dtype dtype) const {
  if (dtype == this->dtype()) {
    return detach();
  }
  const auto v = to_vector();
  return from(shape(), v, dtype);
}

namespace detail {

void record(Tensor& out, std::string_view op, std::vector<Tensor> inputs,
            std::function<void()> backward) {
  if (!t_grad_enabled) {
    return;
  }
  bool any = false;
  for (const auto& in : inputs) {
    any = any || in.requires_grad();
  }
  if (!any) {
    return;
  }
  auto& impl = out.impl();
  auto node = std::make_shared<Node>();
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  node->op = std::string(op);
  node->inputs = std::move(inputs);
  node->output = &impl;
  node->backward = std::move(backward);
  impl.producer = std::move(node);
  impl.requires_grad = true;
}

}  // namespace detail

Tape Tape::from_root(const Tensor& root) {
  Tape tape;
  std::unordered_set<const detail::Node*> seen;
  std::vector<const detail::Node*> stack;
  if (root.impl().producer) {
    stack.push_back(root.impl().producer.get());
  }
  while (!stack.empty()) {
    const detail::Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) {
      continue;
    }
    tape.nodes_.push_back(n);
    for (const auto& in : n->inputs) {
      if (const auto& p = in.impl().producer) {
        stack.push_back(p.get());
      }
    }
  }
  std::sort(tape.nodes_.begin(), tape.nodes_.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq < b->seq; });
  return tape;
}

bool Tape::is_topological() const {
  std::unordered_set<const detail::TensorImpl*> produced;
  for (const auto* n : nodes_) {
    for (const auto& in : n->inputs) {
      const auto& p = in.impl().producer;
      if (p && !produced.contains(&in.impl())) {
        return false;
      }
    }
    produced.insert(n->output);
  }
  return true;
}

void backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw RankError("backward needs a scalar root, got shape " + shape_string(root.shape()));
  }
  if (!root.requires_grad()) {
    return;
  }
  detail::dispatch(root.dtype(), [&]<class T>(T) {
    auto& g = root.impl().grad_buffer<T>();
    g[0] += T{1};
  });
  const Tape tape = Tape::from_root(root);
  for (auto it = tape.nodes().rbegin(); it != tape.nodes().rend(); ++it) {
    const detail::Node* n = *it;
    if (n->output->has_grad) {
      n->backward();
    }
  }
}

}  // namespace dkd

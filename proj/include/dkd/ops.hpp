#pragma once

#include <cstddef>
#include <vector>

#include "dkd/tensor.hpp"

// Differentiable primitives. Every trainable computation in the library is a
// composition of these. "Rows" means the tensor viewed as
// [numel / last_dim, last_dim]. Broadcasting is limited to a bias vector
// added over the last axis.
namespace dkd::ops {

// a: [m, k]; b: [k, n], or [n, k] when transpose_b.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Elementwise sum of same-shape tensors, or `a` plus a bias vector `b` whose
// length equals a's last dimension.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// Time-major valid convolution. x: [length, in_channels];
// w: [out_channels, kernel, in_channels / groups]. Output:
// [(length - kernel) / stride + 1, out_channels].
Tensor conv1d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t groups = 1);

// x: [length, channels]. Statistics per channel group over all frames, then a
// per-channel affine map.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t groups,
                  double eps = 1e-5);
// Normalizes each row, then applies the per-feature affine map.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Exact form x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);

inline constexpr double kCosineEps = 1e-8;

// Per-row sum |a - b|. Result has the input shape minus its last axis ([1] for
// vectors).
Tensor l1_distance(const Tensor& a, const Tensor& b);
// Per-row a.b / ((|a| + eps)(|b| + eps)).
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& x, const Shape& shape);

}  // namespace dkd::ops

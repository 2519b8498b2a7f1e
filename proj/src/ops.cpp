#include "dkd/ops.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace dkd::ops {

namespace {

using detail::dispatch;
using detail::grad_sink;
using detail::TensorImpl;

template <class T>
const T* cptr(const Tensor& t) {
  return t.impl().values<T>().data();
}

template <class T>
T* wptr(Tensor& t) {
  return t.impl().values<T>().data();
}

template <class T>
const T* gout(TensorImpl* o) {
  return o->grads<T>().data();
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ParameterError(std::string(op) + ": dtype mismatch " + std::string(to_string(a.dtype())) + " vs " +
                         std::string(to_string(b.dtype())));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* arg) {
  if (t.rank() != rank) {
    throw RankError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) + ", got " +
                    shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

Shape row_result_shape(const Shape& s) {
  if (s.size() == 1) {
    return {1};
  }
  return Shape(s.begin(), s.end() - 1);
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) {
    acc += a[i] * b[i];
  }
  return acc;
}

template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    y[i] += alpha * x[i];
  }
}

// Pointwise op with derivative expressed through input and output values.
template <class Fwd, class Bwd>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Bwd bwd) {
  Tensor out = make_tensor(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xp = cptr<T>(x);
    T* yp = wptr<T>(out);
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
      yp[i] = static_cast<T>(fwd(static_cast<double>(xp[i])));
    }
    TensorImpl* o = &out.impl();
    detail::record(out, name, {x}, [x, o, bwd, n] {
      auto* gx = grad_sink<T>(x);
      if (!gx) {
        return;
      }
      const T* xp = cptr<T>(x);
      const T* yp = o->values<T>().data();
      const T* go = gout<T>(o);
      for (std::size_t i = 0; i < n; ++i) {
        (*gx)[i] += static_cast<T>(go[i] * bwd(static_cast<double>(xp[i]), static_cast<double>(yp[i])));
      }
    });
  });
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  require_same_dtype(a, b, "matmul");
  const std::size_t m = a.dim(0);
  const std::size_t k = a.dim(1);
  const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (bk != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()) + (transpose_b ? "^T" : ""));
  }
  Tensor out = make_tensor({m, n}, a.dtype());
  dispatch(a.dtype(), [&]<class T>(T) {
    const T* ap = cptr<T>(a);
    const T* bp = cptr<T>(b);
    T* op = wptr<T>(out);
    for (std::size_t i = 0; i < m; ++i) {
      T* orow = op + i * n;
      if (transpose_b) {
        for (std::size_t j = 0; j < n; ++j) {
          orow[j] = dot(ap + i * k, bp + j * k, k);
        }
      } else {
        for (std::size_t p = 0; p < k; ++p) {
          axpy(ap[i * k + p], bp + p * n, orow, n);
        }
      }
    }
    TensorImpl* o = &out.impl();
    detail::record(out, "matmul", {a, b}, [a, b, o, m, k, n, transpose_b] {
      const T* go = gout<T>(o);
      const T* ap = cptr<T>(a);
      const T* bp = cptr<T>(b);
      if (auto* ga = grad_sink<T>(a)) {
        for (std::size_t i = 0; i < m; ++i) {
          T* garow = ga->data() + i * k;
          if (transpose_b) {
            for (std::size_t j = 0; j < n; ++j) {
              axpy(go[i * n + j], bp + j * k, garow, k);
            }
          } else {
            for (std::size_t p = 0; p < k; ++p) {
              garow[p] += dot(go + i * n, bp + p * n, n);
            }
          }
        }
      }
      if (auto* gb = grad_sink<T>(b)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const T aip = ap[i * k + p];
            if (transpose_b) {
              for (std::size_t j = 0; j < n; ++j) {
                (*gb)[j * k + p] += go[i * n + j] * aip;
              }
            } else {
              axpy(aip, go + i * n, gb->data() + p * n, n);
            }
          }
        }
      }
    });
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "add");
  const bool bias = a.shape() != b.shape();
  if (bias && !(b.rank() == 1 && b.dim(0) == a.shape().back())) {
    throw ShapeError("add: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                     " neither match nor form a bias over the last axis");
  }
  Tensor out = make_tensor(a.shape(), a.dtype());
  const std::size_t n = a.numel();
  const std::size_t width = b.numel();
  dispatch(a.dtype(), [&]<class T>(T) {
    const T* ap = cptr<T>(a);
    const T* bp = cptr<T>(b);
    T* op = wptr<T>(out);
    for (std::size_t i = 0; i < n; ++i) {
      op[i] = ap[i] + bp[i % width];
    }
    TensorImpl* o = &out.impl();
    detail::record(out, "add", {a, b}, [a, b, o, n, width] {
      const T* go = gout<T>(o);
      if (auto* ga = grad_sink<T>(a)) {
        for (std::size_t i = 0; i < n; ++i) {
          (*ga)[i] += go[i];
        }
      }
      if (auto* gb = grad_sink<T>(b)) {
        for (std::size_t i = 0; i < n; ++i) {
          (*gb)[i % width] += go[i];
        }
      }
    });
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "mul");
  require_same_shape(a, b, "mul");
  Tensor out = make_tensor(a.shape(), a.dtype());
  const std::size_t n = a.numel();
  dispatch(a.dtype(), [&]<class T>(T) {
    const T* ap = cptr<T>(a);
    const T* bp = cptr<T>(b);
    T* op = wptr<T>(out);
    for (std::size_t i = 0; i < n; ++i) {
      op[i] = ap[i] * bp[i];
    }
    TensorImpl* o = &out.impl();
    detail::record(out, "mul", {a, b}, [a, b, o, n] {
      const T* go = gout<T>(o);
      const T* ap = cptr<T>(a);
      const T* bp = cptr<T>(b);
      if (auto* ga = grad_sink<T>(a)) {
        for (std::size_t i = 0; i < n; ++i) {
          (*ga)[i] += go[i] * bp[i];
        }
      }
      if (auto* gb = grad_sink<T>(b)) {
        for (std::size_t i = 0; i < n; ++i) {
          (*gb)[i] += go[i] * ap[i];
        }
      }
    });
  });
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = make_tensor(a.shape(), a.dtype());
  const std::size_t n = a.numel();
  dispatch(a.dtype(), [&]<class T>(T) {
    const T f = static_cast<T>(factor);
    const T* ap = cptr<T>(a);
    T* op = wptr<T>(out);
    for (std::size_t i = 0; i < n; ++i) {
      op[i] = ap[i] * f;
    }
    TensorImpl* o = &out.impl();
    detail::record(out, "scale", {a}, [a, o, n, f] {
      const T* go = gout<T>(o);
      if (auto* ga = grad_sink<T>(a)) {
        for (std::size_t i = 0; i < n; ++i) {
          (*ga)[i] += go[i] * f;
        }
      }
    });
  });
  return out;
}

Tensor conv1d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t groups) {
  require_rank(x, 2, "conv1d", "input");
  require_rank(w, 3, "conv1d", "weight");
  require_same_dtype(x, w, "conv1d");
  if (stride == 0 || groups == 0) {
    throw ParameterError("conv1d: stride and groups must be positive");
  }
  const std::size_t length = x.dim(0);
  const std::size_t cin = x.dim(1);
  const std::size_t cout = w.dim(0);
  const std::size_t kernel = w.dim(1);
  if (cin % groups != 0 || cout % groups != 0) {
    throw ShapeError("conv1d: channels " + std::to_string(cin) + "->" + std::to_string(cout) +
                     " not divisible by groups " + std::to_string(groups));
  }
  const std::size_t cig = cin / groups;
  const std::size_t cog = cout / groups;
  if (w.dim(2) != cig) {
    throw ShapeError("conv1d: weight " + shape_string(w.shape()) + " expects " + std::to_string(w.dim(2)) +
                     " input channels per group, input provides " + std::to_string(cig));
  }
  if (length < kernel) {
    throw LengthError("conv1d: input length " + std::to_string(length) + " shorter than kernel " +
                      std::to_string(kernel));
  }
  const std::size_t out_len = (length - kernel) / stride + 1;
  Tensor out = make_tensor({out_len, cout}, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xp = cptr<T>(x);
    const T* wp = cptr<T>(w);
    T* op = wptr<T>(out);
    for (std::size_t t = 0; t < out_len; ++t) {
      const T* base = xp + t * stride * cin;
      T* orow = op + t * cout;
      if (groups == 1) {
        // The receptive field of frame t is one contiguous block.
        for (std::size_t co = 0; co < cout; ++co) {
          orow[co] = dot(wp + co * kernel * cin, base, kernel * cin);
        }
      } else {
        for (std::size_t co = 0; co < cout; ++co) {
          const std::size_t g = co / cog;
          T acc{0};
          for (std::size_t k = 0; k < kernel; ++k) {
            acc += dot(wp + (co * kernel + k) * cig, base + k * cin + g * cig, cig);
          }
          orow[co] = acc;
        }
      }
    }
    TensorImpl* o = &out.impl();
    detail::record(out, "conv1d", {x, w}, [x, w, o, out_len, cin, cout, kernel, stride, cig, cog] {
      const T* go = gout<T>(o);
      const T* xp = cptr<T>(x);
      const T* wp = cptr<T>(w);
      auto* gx = grad_sink<T>(x);
      auto* gw = grad_sink<T>(w);
      for (std::size_t t = 0; t < out_len; ++t) {
        const std::size_t base = t * stride * cin;
        for (std::size_t co = 0; co < cout; ++co) {
          const T g = go[t * cout + co];
          if (g == T{0}) {
            continue;
          }
          const std::size_t grp = co / cog;
          for (std::size_t k = 0; k < kernel; ++k) {
            const std::size_t xoff = base + k * cin + grp * cig;
            const std::size_t woff = (co * kernel + k) * cig;
            if (gw) {
              axpy(g, xp + xoff, gw->data() + woff, cig);
            }
            if (gx) {
              axpy(g, wp + woff, gx->data() + xoff, cig);
            }
          }
        }
      }
    });
  });
  return out;
}

namespace {

// Normalizes `count` sets of elements, set s holding elements
// index(s, 0..size-1), then applies gamma/beta by channel(i).
template <class T, class Index>
void normalize_forward(const T* xp, T* xhat, T* inv_std, std::size_t count, std::size_t size, double eps,
                       Index index) {
  for (std::size_t s = 0; s < count; ++s) {
    double m = 0.0;
    for (std::size_t i = 0; i < size; ++i) {
      m += xp[index(s, i)];
    }
    m /= static_cast<double>(size);
    double v = 0.0;
    for (std::size_t i = 0; i < size; ++i) {
      const double d = xp[index(s, i)] - m;
      v += d * d;
    }
    v /= static_cast<double>(size);
    const double r = 1.0 / std::sqrt(v + eps);
    inv_std[s] = static_cast<T>(r);
    for (std::size_t i = 0; i < size; ++i) {
      const std::size_t j = index(s, i);
      xhat[j] = static_cast<T>((xp[j] - m) * r);
    }
  }
}

template <class T, class Index>
void normalize_backward(const T* dxhat, const T* xhat, const T* inv_std, T* gx, std::size_t count,
                        std::size_t size, Index index) {
  for (std::size_t s = 0; s < count; ++s) {
    double mean_d = 0.0;
    double mean_dx = 0.0;
    for (std::size_t i = 0; i < size; ++i) {
      const std::size_t j = index(s, i);
      mean_d += dxhat[j];
      mean_dx += static_cast<double>(dxhat[j]) * xhat[j];
    }
    mean_d /= static_cast<double>(size);
    mean_dx /= static_cast<double>(size);
    for (std::size_t i = 0; i < size; ++i) {
      const std::size_t j = index(s, i);
      gx[j] += static_cast<T>(inv_std[s] * (dxhat[j] - mean_d - xhat[j] * mean_dx));
    }
  }
}

template <class Index>
Tensor normalized_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t count,
                         std::size_t size, double eps, const char* name, Index index) {
  const std::size_t channels = x.shape().back();
  if (gamma.rank() != 1 || gamma.dim(0) != channels || beta.shape() != gamma.shape()) {
    throw ShapeError(std::string(name) + ": affine parameters " + shape_string(gamma.shape()) + "/" +
                     shape_string(beta.shape()) + " do not match " + std::to_string(channels) + " channels");
  }
  require_same_dtype(x, gamma, name);
  require_same_dtype(x, beta, name);
  Tensor out = make_tensor(x.shape(), x.dtype());
  const std::size_t n = x.numel();
  dispatch(x.dtype(), [&]<class T>(T) {
    std::vector<T> xhat(n);
    std::vector<T> inv_std(count);
    normalize_forward(cptr<T>(x), xhat.data(), inv_std.data(), count, size, eps, index);
    const T* gp = cptr<T>(gamma);
    const T* bp = cptr<T>(beta);
    T* op = wptr<T>(out);
    for (std::size_t j = 0; j < n; ++j) {
      op[j] = xhat[j] * gp[j % channels] + bp[j % channels];
    }
    TensorImpl* o = &out.impl();
    detail::record(out, name,
                   {x, gamma, beta},
                   [x, gamma, beta, o, n, channels, count, size, index, xhat = std::move(xhat),
                    inv_std = std::move(inv_std)] {
                     const T* go = gout<T>(o);
                     const T* gp = cptr<T>(gamma);
                     if (auto* gg = grad_sink<T>(gamma)) {
                       for (std::size_t j = 0; j < n; ++j) {
                         (*gg)[j % channels] += go[j] * xhat[j];
                       }
                     }
                     if (auto* gb = grad_sink<T>(beta)) {
                       for (std::size_t j = 0; j < n; ++j) {
                         (*gb)[j % channels] += go[j];
                       }
                     }
                     if (auto* gx = grad_sink<T>(x)) {
                       std::vector<T> dxhat(n);
                       for (std::size_t j = 0; j < n; ++j) {
                         dxhat[j] = go[j] * gp[j % channels];
                       }
                       normalize_backward(dxhat.data(), xhat.data(), inv_std.data(), gx->data(), count, size,
                                          index);
                     }
                   });
  });
  return out;
}

}  // namespace

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t groups, double eps) {
  require_rank(x, 2, "group_norm", "input");
  const std::size_t length = x.dim(0);
  const std::size_t channels = x.dim(1);
  if (groups == 0 || channels % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  const std::size_t per = channels / groups;
  auto index = [channels, per](std::size_t g, std::size_t i) { return (i / per) * channels + g * per + i % per; };
  return normalized_affine(x, gamma, beta, groups, length * per, eps, "group_norm", index);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  auto index = [width](std::size_t r, std::size_t i) { return r * width + i; };
  return normalized_affine(x, gamma, beta, rows, width, eps, "layer_norm", index);
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor softmax(const Tensor& x) {
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  Tensor out = make_tensor(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xp = cptr<T>(x);
    T* yp = wptr<T>(out);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = xp + r * width;
      T* yr = yp + r * width;
      T mx = xr[0];
      for (std::size_t i = 1; i < width; ++i) {
        mx = std::max(mx, xr[i]);
      }
      T total{0};
      for (std::size_t i = 0; i < width; ++i) {
        yr[i] = std::exp(xr[i] - mx);
        total += yr[i];
      }
      for (std::size_t i = 0; i < width; ++i) {
        yr[i] /= total;
      }
    }
    TensorImpl* o = &out.impl();
    detail::record(out, "softmax", {x}, [x, o, rows, width] {
      auto* gx = grad_sink<T>(x);
      if (!gx) {
        return;
      }
      const T* go = gout<T>(o);
      const T* yp = o->values<T>().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T inner = dot(go + r * width, yp + r * width, width);
        for (std::size_t i = 0; i < width; ++i) {
          (*gx)[r * width + i] += yp[r * width + i] * (go[r * width + i] - inner);
        }
      }
    });
  });
  return out;
}

Tensor l1_distance(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "l1_distance");
  require_same_shape(a, b, "l1_distance");
  const std::size_t width = a.shape().back();
  const std::size_t rows = a.numel() / width;
  Tensor out = make_tensor(row_result_shape(a.shape()), a.dtype());
  dispatch(a.dtype(), [&]<class T>(T) {
    const T* ap = cptr<T>(a);
    const T* bp = cptr<T>(b);
    T* op = wptr<T>(out);
    for (std::size_t r = 0; r < rows; ++r) {
      T acc{0};
      for (std::size_t i = 0; i < width; ++i) {
        acc += std::abs(ap[r * width + i] - bp[r * width + i]);
      }
      op[r] = acc;
    }
    TensorImpl* o = &out.impl();
    detail::record(out, "l1_distance", {a, b}, [a, b, o, rows, width] {
      const T* go = gout<T>(o);
      const T* ap = cptr<T>(a);
      const T* bp = cptr<T>(b);
      auto* ga = grad_sink<T>(a);
      auto* gb = grad_sink<T>(b);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < width; ++i) {
          const std::size_t j = r * width + i;
          const T d = ap[j] - bp[j];
          const T s = d > 0 ? T{1} : (d < 0 ? T{-1} : T{0});
          if (ga) {
            (*ga)[j] += go[r] * s;
          }
          if (gb) {
            (*gb)[j] -= go[r] * s;
          }
        }
      }
    });
  });
  return out;
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "cosine_similarity");
  require_same_shape(a, b, "cosine_similarity");
  const std::size_t width = a.shape().back();
  const std::size_t rows = a.numel() / width;
  Tensor out = make_tensor(row_result_shape(a.shape()), a.dtype());
  dispatch(a.dtype(), [&]<class T>(T) {
    const T* ap = cptr<T>(a);
    const T* bp = cptr<T>(b);
    T* op = wptr<T>(out);
    std::vector<T> na(rows);
    std::vector<T> nb(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* ar = ap + r * width;
      const T* br = bp + r * width;
      na[r] = std::sqrt(dot(ar, ar, width));
      nb[r] = std::sqrt(dot(br, br, width));
      const T eps = static_cast<T>(kCosineEps);
      op[r] = dot(ar, br, width) / ((na[r] + eps) * (nb[r] + eps));
    }
    TensorImpl* o = &out.impl();
    detail::record(out, "cosine_similarity", {a, b},
                   [a, b, o, rows, width, na = std::move(na), nb = std::move(nb)] {
                     const T* go = gout<T>(o);
                     const T* cp = o->values<T>().data();
                     const T* ap = cptr<T>(a);
                     const T* bp = cptr<T>(b);
                     const T eps = static_cast<T>(kCosineEps);
                     // d cos / d a = b / den - cos * a / (|a| (|a| + eps)); the
                     // second term is taken as 0 when |a| = 0.
                     auto accumulate = [&](std::vector<T>* g, const T* self, const T* other,
                                           const std::vector<T>& nself, const std::vector<T>& nother) {
                       for (std::size_t r = 0; r < rows; ++r) {
                         const T den = (nself[r] + eps) * (nother[r] + eps);
                         const T k = nself[r] > 0 ? cp[r] / (nself[r] * (nself[r] + eps)) : T{0};
                         for (std::size_t i = 0; i < width; ++i) {
                           const std::size_t j = r * width + i;
                           (*g)[j] += go[r] * (other[j] / den - k * self[j]);
                         }
                       }
                     };
                     if (auto* ga = grad_sink<T>(a)) {
                       accumulate(ga, ap, bp, na, nb);
                     }
                     if (auto* gb = grad_sink<T>(b)) {
                       accumulate(gb, bp, ap, nb, na);
                     }
                   });
  });
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = make_tensor({1}, x.dtype());
  const std::size_t n = x.numel();
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xp = cptr<T>(x);
    T acc{0};
    for (std::size_t i = 0; i < n; ++i) {
      acc += xp[i];
    }
    wptr<T>(out)[0] = acc;
    TensorImpl* o = &out.impl();
    detail::record(out, "sum", {x}, [x, o, n] {
      if (auto* gx = grad_sink<T>(x)) {
        const T g = gout<T>(o)[0];
        for (std::size_t i = 0; i < n; ++i) {
          (*gx)[i] += g;
        }
      }
    });
  });
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) {
    throw ShapeError("concat: no inputs");
  }
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw RankError("concat: axis " + std::to_string(axis) + " out of range for " + shape_string(first));
  }
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    require_same_dtype(parts.front(), p, "concat");
    if (p.rank() != first.size()) {
      throw RankError("concat: rank mismatch " + shape_string(first) + " vs " + shape_string(p.shape()));
    }
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.dim(d) != first[d]) {
        throw ShapeError("concat: dimension " + std::to_string(d) + " differs, " + shape_string(first) +
                         " vs " + shape_string(p.shape()));
      }
    }
    shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) {
    outer *= first[d];
  }
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < first.size(); ++d) {
    inner *= first[d];
  }
  Tensor out = make_tensor(shape, parts.front().dtype());
  const std::size_t out_block = shape[axis] * inner;
  dispatch(out.dtype(), [&]<class T>(T) {
    T* op = wptr<T>(out);
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
      offsets.push_back(offset);
      const std::size_t block = p.dim(axis) * inner;
      const T* pp = cptr<T>(p);
      for (std::size_t o = 0; o < outer; ++o) {
        std::copy(pp + o * block, pp + (o + 1) * block, op + o * out_block + offset);
      }
      offset += block;
    }
    TensorImpl* oi = &out.impl();
    detail::record(out, "concat", parts, [parts, oi, offsets, outer, inner, out_block, axis] {
      const T* go = gout<T>(oi);
      for (std::size_t k = 0; k < parts.size(); ++k) {
        auto* g = grad_sink<T>(parts[k]);
        if (!g) {
          continue;
        }
        const std::size_t block = parts[k].dim(axis) * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < block; ++i) {
            (*g)[o * block + i] += go[o * out_block + offsets[k] + i];
          }
        }
      }
    });
  });
  return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank()) {
    throw RankError("slice: axis " + std::to_string(axis) + " out of range for " + shape_string(x.shape()));
  }
  if (length == 0 || start + length > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis " + std::to_string(axis) + " of " + shape_string(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = length;
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) {
    outer *= x.dim(d);
  }
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < x.rank(); ++d) {
    inner *= x.dim(d);
  }
  const std::size_t in_block = x.dim(axis) * inner;
  const std::size_t block = length * inner;
  const std::size_t skip = start * inner;
  Tensor out = make_tensor(shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xp = cptr<T>(x);
    T* op = wptr<T>(out);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(xp + o * in_block + skip, xp + o * in_block + skip + block, op + o * block);
    }
    TensorImpl* oi = &out.impl();
    detail::record(out, "slice", {x}, [x, oi, outer, in_block, block, skip] {
      auto* g = grad_sink<T>(x);
      if (!g) {
        return;
      }
      const T* go = gout<T>(oi);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < block; ++i) {
          (*g)[o * in_block + skip + i] += go[o * block + i];
        }
      }
    });
  });
  return out;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  Tensor out = make_tensor(shape, x.dtype());
  const std::size_t n = x.numel();
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xp = cptr<T>(x);
    std::copy(xp, xp + n, wptr<T>(out));
    TensorImpl* oi = &out.impl();
    detail::record(out, "reshape", {x}, [x, oi, n] {
      if (auto* g = grad_sink<T>(x)) {
        const T* go = gout<T>(oi);
        for (std::size_t i = 0; i < n; ++i) {
          (*g)[i] += go[i];
        }
      }
    });
  });
  return out;
}

}  // namespace dkd::ops

#include <cmath>
#include <set>

#include "doctest.h"
#include "dkd/ops.hpp"
#include "dkd/random.hpp"
#include "dkd/tensor.hpp"

using namespace dkd;

namespace {

Tensor f64(const Shape& shape, std::vector<double> v, bool rg = false) { return Tensor::from(shape, v, Dtype::f64, rg); }

}  // namespace

TEST_CASE("tensor construction keeps numel equal to the shape product") {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    Shape s;
    const std::size_t rank = 1 + rng.below(3);
    for (std::size_t r = 0; r < rank; ++r) {
      s.push_back(1 + rng.below(5));
    }
    const Tensor t = Tensor::zeros(s, Dtype::f32);
    CHECK(t.numel() == shape_numel(s));
    CHECK(t.to_vector().size() == t.numel());
  }
  CHECK_THROWS_AS(Tensor::zeros({3, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({}), ShapeError);
  CHECK_THROWS_AS(f64({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("precision scope selects the default dtype") {
  CHECK(default_dtype() == Dtype::f32);
  {
    PrecisionScope mode(Dtype::f64);
    CHECK(Tensor::zeros({2}).dtype() == Dtype::f64);
  }
  CHECK(Tensor::zeros({2}).dtype() == Dtype::f32);
  const Tensor t = Tensor::full({2}, 1.5, Dtype::f32);
  CHECK_THROWS_AS(t.values<double>(), ParameterError);
}

TEST_CASE("conv1d output length follows floor((L-K)/S)+1") {
  const Tensor x = Tensor::zeros({10, 1}, Dtype::f64);
  const Tensor w = Tensor::zeros({1, 10, 1}, Dtype::f64);
  CHECK(ops::conv1d(x, w, 5).shape() == Shape{1, 1});
  const Tensor x2 = Tensor::zeros({23, 2}, Dtype::f64);
  const Tensor w2 = Tensor::zeros({4, 3, 2}, Dtype::f64);
  CHECK(ops::conv1d(x2, w2, 2).shape() == Shape{11, 4});
  CHECK_THROWS_AS(ops::conv1d(Tensor::zeros({9, 1}, Dtype::f64), w, 5), LengthError);
}

TEST_CASE("conv1d matches a direct sum, including groups") {
  Rng rng(11);
  const std::size_t L = 9, cin = 4, cout = 6, k = 3, stride = 2, groups = 2;
  std::vector<double> xv(L * cin), wv(cout * k * (cin / groups));
  for (double& v : xv) v = rng.normal();
  for (double& v : wv) v = rng.normal();
  const Tensor y = ops::conv1d(f64({L, cin}, xv), f64({cout, k, cin / groups}, wv), stride, groups);
  const std::size_t out_len = (L - k) / stride + 1;
  REQUIRE(y.shape() == Shape{out_len, cout});
  const std::size_t in_per = cin / groups, out_per = cout / groups;
  for (std::size_t t = 0; t < out_len; ++t) {
    for (std::size_t o = 0; o < cout; ++o) {
      const std::size_t g = o / out_per;
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t c = 0; c < in_per; ++c) {
          acc += wv[(o * k + j) * in_per + c] * xv[(t * stride + j) * cin + g * in_per + c];
        }
      }
      CHECK(y.at(t * cout + o) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("softmax of a single-element row is one") {
  CHECK(ops::softmax(f64({1}, {3.7})).item() == 1.0);
  CHECK(ops::softmax(f64({2, 1}, {-5.0, 1e4})).to_vector() == std::vector<double>{1.0, 1.0});
}

TEST_CASE("softmax is invariant to a constant shift of the logits") {
  const Tensor a = ops::softmax(f64({4}, {0.1, -2.0, 3.0, 0.5}));
  const Tensor b = ops::softmax(f64({4}, {100.1, 98.0, 103.0, 100.5}));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.at(i) == doctest::Approx(b.at(i)).epsilon(1e-12));
  }
  // closed form for logits (0, ln 3)
  const Tensor w = ops::softmax(f64({2}, {0.0, std::log(3.0)}));
  CHECK(w.at(0) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(w.at(1) == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("cosine similarity of orthogonal vectors is zero and zero vectors give zero") {
  CHECK(ops::cosine_similarity(f64({2}, {1, 0}), f64({2}, {0, 1})).item() == 0.0);
  const Tensor z = ops::cosine_similarity(f64({1, 3}, {0, 0, 0}), f64({1, 3}, {1, 2, 3}));
  CHECK(z.item() == 0.0);
  CHECK(ops::cosine_similarity(f64({2}, {3, 4}), f64({2}, {6, 8})).item() ==
        doctest::Approx(50.0 / ((5 + ops::kCosineEps) * (10 + ops::kCosineEps))).epsilon(1e-15));
}

TEST_CASE("l1 distance, sigmoid, log and gelu match closed forms") {
  CHECK(ops::l1_distance(f64({1, 3}, {1, -2, 3}), f64({1, 3}, {0, 0, 0})).item() == 6.0);
  CHECK(ops::sigmoid(f64({1}, {0.0})).item() == 0.5);
  CHECK(ops::log(f64({1}, {std::exp(2.0)})).item() == doctest::Approx(2.0).epsilon(1e-15));
  const double x = 0.7;
  CHECK(ops::gelu(f64({1}, {x})).item() == doctest::Approx(0.5 * x * (1 + std::erf(x / std::sqrt(2.0)))).epsilon(1e-15));
}

TEST_CASE("layer and group normalization produce zero-mean unit-variance outputs") {
  Rng rng(5);
  std::vector<double> v(4 * 6);
  for (double& x : v) x = 3.0 + 2.0 * rng.normal();
  const Tensor x = f64({4, 6}, v);
  const Tensor ln = ops::layer_norm(x, Tensor::full({6}, 1.0, Dtype::f64), Tensor::zeros({6}, Dtype::f64), 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, s = 0;
    for (std::size_t c = 0; c < 6; ++c) m += ln.at(r * 6 + c) / 6;
    for (std::size_t c = 0; c < 6; ++c) s += std::pow(ln.at(r * 6 + c) - m, 2) / 6;
    CHECK(m == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  // groups == channels: per-channel statistics over time
  const Tensor gn = ops::group_norm(x, Tensor::full({6}, 1.0, Dtype::f64), Tensor::zeros({6}, Dtype::f64), 6, 0.0);
  for (std::size_t c = 0; c < 6; ++c) {
    double m = 0;
    for (std::size_t t = 0; t < 4; ++t) m += gn.at(t * 6 + c) / 4;
    CHECK(m == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("shape errors are descriptive") {
  const Tensor a = Tensor::zeros({2, 3}, Dtype::f64);
  CHECK_THROWS_AS(ops::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ops::add(a, Tensor::zeros({2}, Dtype::f64)), ShapeError);
  CHECK_THROWS_AS(ops::l1_distance(a, Tensor::zeros({3, 2}, Dtype::f64)), ShapeError);
  CHECK_THROWS_AS(ops::slice(a, 1, 2, 2), ShapeError);
  CHECK_THROWS_AS(ops::reshape(a, {4}), ShapeError);
  try {
    ops::matmul(a, a);
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("concat and slice round-trip") {
  const Tensor a = f64({2, 2}, {1, 2, 3, 4});
  const Tensor b = f64({1, 2}, {5, 6});
  const Tensor c = ops::concat({a, b}, 0);
  CHECK(c.to_vector() == std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(ops::slice(c, 0, 2, 1).to_vector() == b.to_vector());
  CHECK(ops::concat({a, a}, 1).to_vector() == std::vector<double>{1, 2, 1, 2, 3, 4, 3, 4});
}

TEST_CASE("backward requires a scalar root") {
  const Tensor x = f64({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(ops::scale(x, 2.0)), RankError);
}

TEST_CASE("gradients accumulate across fan-out") {
  const Tensor x = f64({3}, {1.0, -2.0, 0.5}, true);
  // d/dx sum(x*x + x) = 2x + 1
  backward(ops::sum(ops::add(ops::mul(x, x), x)));
  const auto g = x.grad_vector();
  CHECK(g[0] == 3.0);
  CHECK(g[1] == -3.0);
  CHECK(g[2] == 2.0);
}

TEST_CASE("gradient buffers never alias") {
  const Tensor a = f64({2}, {1, 2}, true);
  const Tensor b = f64({2}, {3, 4}, true);
  backward(ops::sum(ops::mul(a, b)));
  CHECK(a.grad_vector() == std::vector<double>{3, 4});
  CHECK(b.grad_vector() == std::vector<double>{1, 2});
  CHECK(&a.impl() != &b.impl());
  CHECK(a.grad_values<double>().data() != b.grad_values<double>().data());
  CHECK(a.grad_values<double>().size() == a.numel());
}

TEST_CASE("tape is topological and visits each node once") {
  const Tensor x = f64({2, 2}, {1, 2, 3, 4}, true);
  const Tensor y = ops::gelu(ops::matmul(x, x));
  const Tensor z = ops::sum(ops::add(y, ops::softmax(y)));
  const Tape tape = Tape::from_root(z);
  CHECK(tape.is_topological());
  std::set<const detail::Node*> seen(tape.nodes().begin(), tape.nodes().end());
  CHECK(seen.size() == tape.size());
  CHECK(tape.size() == 5);
}

TEST_CASE("no-grad scope records nothing") {
  const Tensor x = f64({2}, {1, 2}, true);
  NoGradScope guard;
  const Tensor y = ops::sum(ops::mul(x, x));
  CHECK_FALSE(y.requires_grad());
  CHECK(Tape::from_root(y).size() == 0);
}

TEST_CASE("f32 and f64 kernels agree to single precision") {
  Rng rng(9);
  std::vector<double> v(12);
  for (double& x : v) x = rng.normal();
  const Tensor a64 = f64({3, 4}, v);
  const Tensor a32 = a64.to(Dtype::f32);
  const auto r64 = ops::softmax(ops::gelu(a64)).to_vector();
  const auto r32 = ops::softmax(ops::gelu(a32)).to_vector();
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(r32[i] == doctest::Approx(r64[i]).epsilon(1e-5));
  }
}

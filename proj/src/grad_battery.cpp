#include "dkd/grad_battery.hpp"

#include <functional>
#include <iomanip>
#include <sstream>

#include "dkd/distill.hpp"
#include "dkd/ops.hpp"
#include "dkd/random.hpp"

namespace dkd {

namespace {

using Fn = std::function<Tensor(const Tensor&)>;

struct Battery {
  Rng rng;
  double step;
  std::vector<GradCheckCase> cases;

  std::size_t dim(std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }
  // In {2r + 1, 2r + 2}: strictly increasing in the round, so every round
  // checks a new shape.
  std::size_t lead(int round) { return 2 * static_cast<std::size_t>(round) + dim(1, 2); }

  Tensor normal(const Shape& shape, double scale = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) {
      x = scale * rng.normal();
    }
    return Tensor::from(shape, v, Dtype::f64);
  }

  Tensor uniform(const Shape& shape, double lo, double hi) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) {
      x = rng.uniform(lo, hi);
    }
    return Tensor::from(shape, v, Dtype::f64);
  }

  // Values bounded away from zero in magnitude.
  Tensor away_from_zero(const Shape& shape) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) {
      x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
    }
    return Tensor::from(shape, v, Dtype::f64);
  }

  // Scalarizes `op` by contracting its output with fixed random weights.
  void check(const std::string& op, const std::string& input, const Tensor& point, const Fn& f) {
    PrecisionScope mode(Dtype::f64);
    Shape out_shape;
    {
      NoGradScope no_grad;
      out_shape = f(point).shape();
    }
    const Tensor weights = normal(out_shape);
    const Fn scalar = [&](const Tensor& x) { return ops::sum(ops::mul(f(x), weights)); };
    cases.push_back({op, input, point.shape(), grad_check(scalar, point, step)});
  }
};

void check_shape(Battery& b, int round) {
  PrecisionScope mode(Dtype::f64);
  const std::size_t m = b.lead(round), k = b.lead(round), n = b.lead(round);
  {
    const Tensor a = b.normal({m, k}), w = b.normal({k, n}), wt = b.normal({n, k});
    b.check("matmul", "a", a, [&](const Tensor& x) { return ops::matmul(x, w); });
    b.check("matmul", "b", w, [&](const Tensor& x) { return ops::matmul(a, x); });
    b.check("matmul_tb", "a", a, [&](const Tensor& x) { return ops::matmul(x, wt, true); });
    b.check("matmul_tb", "b", wt, [&](const Tensor& x) { return ops::matmul(a, x, true); });
  }
  {
    const Tensor x = b.normal({m, n}), y = b.normal({m, n}), bias = b.normal({n});
    b.check("add", "a", x, [&](const Tensor& t) { return ops::add(t, y); });
    b.check("add", "b", y, [&](const Tensor& t) { return ops::add(x, t); });
    b.check("add_bias", "bias", bias, [&](const Tensor& t) { return ops::add(x, t); });
    b.check("mul", "a", x, [&](const Tensor& t) { return ops::mul(t, y); });
    b.check("mul", "b", y, [&](const Tensor& t) { return ops::mul(x, t); });
    const double factor = b.rng.uniform(-2.0, 2.0);
    b.check("scale", "x", x, [&](const Tensor& t) { return ops::scale(t, factor); });
    b.check("gelu", "x", x, [&](const Tensor& t) { return ops::gelu(t); });
    b.check("sigmoid", "x", x, [&](const Tensor& t) { return ops::sigmoid(t); });
    b.check("softmax", "x", x, [&](const Tensor& t) { return ops::softmax(t); });
    b.check("log", "x", b.uniform({m, n}, 0.5, 2.0), [&](const Tensor& t) { return ops::log(t); });
    b.check("sum", "x", x, [&](const Tensor& t) { return ops::sum(t); });
    b.check("mean", "x", x, [&](const Tensor& t) { return ops::mean(t); });
    b.check("reshape", "x", x, [&](const Tensor& t) { return ops::reshape(t, {n, m}); });
    const std::size_t start = b.rng.below(n), len = 1 + b.rng.below(n - start);
    b.check("slice", "x", x, [&](const Tensor& t) { return ops::slice(t, 1, start, len); });
    const std::size_t axis = b.rng.below(2);
    const Tensor other = axis == 0 ? b.normal({k, n}) : b.normal({m, k});
    b.check("concat", "first", x, [&](const Tensor& t) { return ops::concat({t, other}, axis); });
    b.check("concat", "second", other, [&](const Tensor& t) { return ops::concat({x, t}, axis); });
  }
  {
    const std::size_t c = 1 + b.lead(round);
    const Tensor x = b.normal({m + 1, c}), g = b.normal({c}), be = b.normal({c});
    b.check("layer_norm", "x", x, [&](const Tensor& t) { return ops::layer_norm(t, g, be); });
    b.check("layer_norm", "gamma", g, [&](const Tensor& t) { return ops::layer_norm(x, t, be); });
    b.check("layer_norm", "beta", be, [&](const Tensor& t) { return ops::layer_norm(x, g, t); });
    const Tensor d = ops::add(x, b.away_from_zero({m + 1, c}));
    b.check("l1_distance", "a", x, [&](const Tensor& t) { return ops::l1_distance(t, d); });
    b.check("l1_distance", "b", d, [&](const Tensor& t) { return ops::l1_distance(x, t); });
    b.check("cosine_similarity", "a", x, [&](const Tensor& t) { return ops::cosine_similarity(t, d); });
    b.check("cosine_similarity", "b", d, [&](const Tensor& t) { return ops::cosine_similarity(x, t); });
  }
  {
    const std::size_t channels = 2 * static_cast<std::size_t>(round + 1), groups = b.dim(1, 2), length = 1 + b.lead(round);
    const Tensor x = b.normal({length, channels}), g = b.normal({channels}), be = b.normal({channels});
    b.check("group_norm", "x", x, [&](const Tensor& t) { return ops::group_norm(t, g, be, groups); });
    b.check("group_norm", "gamma", g, [&](const Tensor& t) { return ops::group_norm(x, t, be, groups); });
    b.check("group_norm", "beta", be, [&](const Tensor& t) { return ops::group_norm(x, g, t, groups); });
  }
  {
    const std::size_t groups = b.dim(1, 2), cin = 2 * static_cast<std::size_t>(round + 1), cout = groups * b.dim(1, 2);
    const std::size_t kernel = 1 + static_cast<std::size_t>(round), stride = b.dim(1, 3), length = kernel + stride * b.dim(0, 4);
    const Tensor x = b.normal({length, cin}), w = b.normal({cout, kernel, cin / groups});
    b.check("conv1d", "x", x, [&](const Tensor& t) { return ops::conv1d(t, w, stride, groups); });
    b.check("conv1d", "w", w, [&](const Tensor& t) { return ops::conv1d(x, t, stride, groups); });
  }
  {
    const std::size_t frames = b.lead(round), width = b.dim(2, 6);
    DistillSpec spec;
    spec.predicted_layers = {1, 2};
    spec.lambda = b.rng.uniform(0.0, 2.0);
    const Tensor h1 = b.normal({frames, width}), h2 = b.normal({frames, width});
    const Tensor s2 = b.normal({frames, width});
    const Tensor s1 = ops::add(h1, b.away_from_zero({frames, width}));
    for (auto red : {LossReduction::mean_over_time, LossReduction::sum_over_time}) {
      spec.reduction = red;
      const std::string name =
          red == LossReduction::mean_over_time ? "distill_loss_mean" : "distill_loss_sum";
      b.check(name, "student", s1, [&](const Tensor& t) {
        const std::map<int, FeatureMap> student{{1, {t, 1}}, {2, {s2, 2}}};
        const std::map<int, FeatureMap> teacher{{1, {h1, 1}}, {2, {h2, 2}}};
        return distill_loss(student, teacher, spec).total;
      });
    }
  }
}

}  // namespace

std::vector<GradCheckCase> run_grad_battery(std::uint64_t seed, int shapes_per_op, double step) {
  if (shapes_per_op < 1) {
    throw ParameterError("grad battery: shapes_per_op must be >= 1");
  }
  Battery b{Rng(seed), step, {}};
  for (int i = 0; i < shapes_per_op; ++i) {
    check_shape(b, i);
  }
  return b.cases;
}

std::string grad_battery_csv(const std::vector<GradCheckCase>& cases) {
  std::ostringstream os;
  os << "op,input,shape,max_rel_error,mean_rel_error\n";
  for (const auto& c : cases) {
    std::string shape;
    for (std::size_t i = 0; i < c.shape.size(); ++i) {
      shape += (i ? "x" : "") + std::to_string(c.shape[i]);
    }
    os << c.op << ',' << c.input << ',' << shape << ',' << std::scientific << std::setprecision(3)
       << c.report.max_rel_error << ',' << c.report.mean_rel_error << std::defaultfloat << '\n';
  }
  return os.str();
}

}  // namespace dkd

#include <cmath>
#include <limits>

#include "doctest.h"
#include "dkd/ops.hpp"
#include "dkd/trainer.hpp"

using namespace dkd;

namespace {

Corpus tiny_corpus() {
  CorpusParams p;
  p.n_speakers = 2;
  p.n_contents = 2;
  p.n_intents = 2;
  p.utterances_per_cell = 2;
  p.duration_s = 0.1;
  return generate_corpus(p);
}

TrainConfig short_run(std::int64_t steps) {
  TrainConfig c = TrainConfig::desk();
  c.total_updates = steps;
  c.batch_size = 4;
  return c;
}

DistillSpec spec_246() {
  DistillSpec s;
  s.predicted_layers = {2, 4, 6};
  return s;
}

ParameterMap scalar_param(double value) {
  ParameterMap p;
  p["p"] = Tensor::from({1}, std::vector<double>{value}, Dtype::f64, true);
  return p;
}

}  // namespace

TEST_CASE("learning-rate schedule at the reference configuration") {
  const TrainConfig c = TrainConfig::reference();
  CHECK(warmup_steps(c) == 14000);
  CHECK(lr_at(0, c) == 0.0);
  CHECK(std::abs(lr_at(14000, c) - 2e-4) <= 1e-12);
  CHECK(std::abs(lr_at(107000, c) - 1e-4) <= 1e-12);
  CHECK(lr_at(200000, c) == 0.0);
  CHECK(std::abs(lr_at(7000, c) - 1e-4) <= 1e-12);
  CHECK_THROWS_AS(lr_at(-1, c), ParameterError);
  CHECK_THROWS_AS(lr_at(200001, c), ParameterError);
}

TEST_CASE("schedule peaks exactly once at peak_lr and ends at zero") {
  for (std::int64_t total : {1, 2, 7, 100, 2000}) {
    TrainConfig c = TrainConfig::desk();
    c.total_updates = total;
    double peak = 0.0;
    for (std::int64_t s = 0; s <= total; ++s) {
      const double lr = lr_at(s, c);
      CHECK(lr >= 0.0);
      peak = std::max(peak, lr);
    }
    CHECK(peak == c.peak_lr);
    CHECK(lr_at(total, c) == 0.0);
  }
  // round-half-up of 0.07 * total
  TrainConfig c = TrainConfig::desk();
  c.total_updates = 50;
  CHECK(warmup_steps(c) == 4);
  c.total_updates = 2000;
  CHECK(warmup_steps(c) == 140);
}

TEST_CASE("train config validation") {
  TrainConfig c = TrainConfig::desk();
  c.total_updates = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig::desk();
  c.warmup_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig::desk();
  c.peak_lr = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(train_config_from_json(to_json(TrainConfig::reference())).total_updates == 200000);
}

TEST_CASE("first Adam step from a scalar gradient") {
  ParameterMap p = scalar_param(0.0);
  backward(ops::scale(ops::sum(p.at("p")), 0.5));
  AdamState st;
  adam_step(p, {"p"}, st, 1e-3, AdamConfig{0.9, 0.98, 1e-8});
  const double expect = -1e-3 * 0.5 / (0.5 + 1e-8);
  CHECK(p.at("p").item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK(p.at("p").item() == doctest::Approx(-9.99999998e-4).epsilon(1e-9));
  CHECK(st.step == 1);
}

TEST_CASE("zero gradient leaves parameters unchanged") {
  ParameterMap p = scalar_param(1.25);
  backward(ops::scale(ops::sum(p.at("p")), 0.0));
  AdamState st;
  adam_step(p, {"p"}, st, 1e-3, AdamConfig{});
  CHECK(p.at("p").item() == 1.25);
}

TEST_CASE("second identical gradient moves no further than the first") {
  ParameterMap p = scalar_param(0.0);
  AdamState st;
  double prev = 0.0, d1 = 0.0, d2 = 0.0;
  for (int i = 0; i < 2; ++i) {
    p.at("p").zero_grad();
    backward(ops::scale(ops::sum(p.at("p")), -0.3));
    adam_step(p, {"p"}, st, 1e-3, AdamConfig{});
    (i == 0 ? d1 : d2) = std::abs(p.at("p").item() - prev);
    prev = p.at("p").item();
  }
  CHECK(d2 <= d1 * (1 + 1e-6));
}

TEST_CASE("non-finite gradients abort with the parameter name") {
  ParameterMap p = scalar_param(0.0);
  p["other"] = Tensor::from({1}, std::vector<double>{1.0}, Dtype::f64, true);
  backward(ops::sum(ops::mul(p.at("p"), Tensor::from({1}, std::vector<double>{std::numeric_limits<double>::quiet_NaN()}, Dtype::f64))));
  AdamState st;
  try {
    adam_step(p, {"other", "p"}, st, 1e-3, AdamConfig{});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("parameter p") != std::string::npos);
  }
}

TEST_CASE("a tiny Adam step does not increase the loss on a frozen batch") {
  const Corpus corpus = tiny_corpus();
  const Encoder teacher = build(EncoderConfig::desk_teacher(), 1);
  Encoder student = build(EncoderConfig::desk_student({2, 4, 6}), 2);
  const DistillSpec spec = spec_246();
  const Tensor wave = wave_tensor(corpus, 0, 1600);
  std::map<int, FeatureMap> targets;
  {
    NoGradScope guard;
    const EncoderOutput t = teacher.forward(wave);
    for (int l : spec.predicted_layers) targets.emplace(l, t.layers[static_cast<std::size_t>(l)]);
  }
  std::vector<std::string> names;
  for (auto& [n, t] : student.parameters()) {
    t.set_requires_grad(true);
    names.push_back(n);
  }
  const auto loss_now = [&] {
    return distill_loss(student_predictions(student.forward(wave), spec), targets, spec).total;
  };
  const Tensor before = loss_now();
  backward(before);
  AdamState st;
  adam_step(student.parameters(), names, st, 1e-6, AdamConfig{});
  CHECK(loss_now().item() <= before.item() + 1e-7);
}

TEST_CASE("short distillation runs are deterministic and log the schedule") {
  const Corpus corpus = tiny_corpus();
  const Encoder teacher = build(EncoderConfig::desk_teacher(), 1);
  const TrainConfig cfg = short_run(4);
  const auto a = run_distillation(teacher, EncoderConfig::desk_student(), spec_246(), cfg, corpus);
  const auto b = run_distillation(teacher, EncoderConfig::desk_student(), spec_246(), cfg, corpus);
  CHECK(serialize(a.checkpoint) == serialize(b.checkpoint));
  CHECK(a.log.digest() == b.log.digest());
  CHECK(a.teacher_digest_before == a.teacher_digest_after);
  REQUIRE(a.log.records.size() == 4);
  for (std::size_t i = 0; i < a.log.records.size(); ++i) {
    const auto& r = a.log.records[i];
    CHECK(r.step == static_cast<std::int64_t>(i + 1));
    CHECK(r.lr == lr_at(r.step, cfg));
  }
  CHECK(a.checkpoint.meta.contains("log_digest"));
  CHECK(a.checkpoint.encoder.head_layers == std::vector<int>{2, 4, 6});
  const std::string csv = a.log.to_csv();
  CHECK(csv.rfind("step,lr,loss_total,loss_l1_2,loss_l1_4,loss_l1_6,loss_cos_2,loss_cos_4,loss_cos_6,wall_ms\n", 0) == 0);
}

TEST_CASE("lambda changes the losses but not the learning-rate trace") {
  const Corpus corpus = tiny_corpus();
  const Encoder teacher = build(EncoderConfig::desk_teacher(), 1);
  DistillSpec zero = spec_246();
  zero.lambda = 0.0;
  const auto a = run_distillation(teacher, EncoderConfig::desk_student(), spec_246(), short_run(3), corpus);
  const auto b = run_distillation(teacher, EncoderConfig::desk_student(), zero, short_run(3), corpus);
  CHECK(a.log.records[0].loss_total != b.log.records[0].loss_total);
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.log.records[i].lr == b.log.records[i].lr);
}

TEST_CASE("without the cosine term every logged cosine is exactly zero") {
  const Corpus corpus = tiny_corpus();
  const Encoder teacher = build(EncoderConfig::desk_teacher(), 1);
  DistillSpec s = spec_246();
  s.use_cosine = false;
  const auto r = run_distillation(teacher, EncoderConfig::desk_student(), s, short_run(3), corpus);
  for (const auto& rec : r.log.records) {
    for (const auto& [l, v] : rec.cosine) CHECK(v == 0.0);
  }
}

TEST_CASE("exhausting a non-repeating corpus is a data error") {
  const Corpus corpus = tiny_corpus();
  const Encoder teacher = build(EncoderConfig::desk_teacher(), 1);
  TrainConfig cfg = short_run(5);
  cfg.repeat = false;
  // 16 utterances in batches of 4 give four batches
  CHECK_THROWS_AS(run_distillation(teacher, EncoderConfig::desk_student(), spec_246(), cfg, corpus), DataError);
}

TEST_CASE("student heads must match the predicted layers") {
  const Corpus corpus = tiny_corpus();
  const Encoder teacher = build(EncoderConfig::desk_teacher(), 1);
  DistillSpec s = spec_246();
  s.predicted_layers = {7};
  CHECK_THROWS_AS(run_distillation(teacher, EncoderConfig::desk_student(), s, short_run(1), corpus), SpecError);
}

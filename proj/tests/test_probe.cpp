#include <cmath>
#include <numeric>

#include "doctest.h"
#include "dkd/grad_battery.hpp"
#include "dkd/ops.hpp"
#include "dkd/probe.hpp"
#include "dkd/random.hpp"
#include "dkd/trainer.hpp"

using namespace dkd;

namespace {

FeatureMap map_of(std::vector<double> v, std::size_t t, std::size_t d) {
  return FeatureMap{Tensor::from({t, d}, v, Dtype::f64), 0};
}

Tensor logits(std::vector<double> v) { return Tensor::from({v.size()}, v, Dtype::f64); }

Corpus probe_corpus() {
  CorpusParams p;
  p.n_speakers = 3;
  p.n_contents = 2;
  p.n_intents = 2;
  p.utterances_per_cell = 4;
  p.duration_s = 0.1;
  return generate_corpus(p);
}

std::uint64_t fnv(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

TEST_CASE("weighted sum closed forms") {
  const FeatureMap a = map_of({1, 2, 3, 4}, 2, 2);
  const FeatureMap b = map_of({5, 6, 7, 8}, 2, 2);
  const FeatureMap c = map_of({-1, 0, 2, 9}, 2, 2);

  const auto mean = weighted_sum({a, b, c}, logits({0.3, 0.3, 0.3})).frames.to_vector();
  const std::vector<double> expect{5.0 / 3, 8.0 / 3, 4.0, 7.0};
  for (std::size_t i = 0; i < 4; ++i) CHECK(mean[i] == doctest::Approx(expect[i]).epsilon(1e-12));

  const auto sat = weighted_sum({a, b, c}, logits({0.0, 1e4, 0.0})).frames.to_vector();
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(sat[i] - b.frames.at(i)) <= 1e-6);

  const auto w = weighted_sum({a, b}, logits({0.0, std::log(3.0)})).frames.to_vector();
  CHECK(w[0] == doctest::Approx(0.25 * 1 + 0.75 * 5).epsilon(1e-12));
  CHECK(SummaryWeights{{0.0, std::log(3.0)}}.softmax()[0] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("weighted sum is invariant to a shift of all logits") {
  Rng rng(1);
  std::vector<FeatureMap> maps;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> v(6);
    for (double& x : v) x = rng.normal();
    maps.push_back(map_of(v, 3, 2));
  }
  const auto x = weighted_sum(maps, logits({0.1, -0.4, 2.0, 0.0})).frames.to_vector();
  const auto y = weighted_sum(maps, logits({5.1, 4.6, 7.0, 5.0})).frames.to_vector();
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(x[i] - y[i]) <= 1e-6);
}

TEST_CASE("summary weights always sum to one") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    SummaryWeights w;
    for (int i = 0; i < 1 + static_cast<int>(rng.below(12)); ++i) w.logits.push_back(20.0 * rng.normal());
    const auto s = w.softmax();
    CHECK(std::abs(std::accumulate(s.begin(), s.end(), 0.0) - 1.0) <= 1e-6);
  }
}

TEST_CASE("weighted sum errors and gradient") {
  const FeatureMap a = map_of({1, 2, 3, 4}, 2, 2);
  CHECK_THROWS_AS(weighted_sum({a, a}, logits({0.0})), ShapeError);
  CHECK_THROWS_AS(weighted_sum({a, map_of({1, 2}, 1, 2)}, logits({0.0, 0.0})), ShapeError);

  const FeatureMap b = map_of({0.5, -1, 2, 0}, 2, 2);
  const Tensor probe_w = Tensor::from({2, 2}, std::vector<double>{0.3, -0.7, 1.1, 0.2}, Dtype::f64);
  const auto f = [&](const Tensor& l) { return ops::sum(ops::mul(weighted_sum({a, b}, l).frames, probe_w)); };
  CHECK(grad_check(f, logits({0.2, -0.5})).max_rel_error <= 1e-6);
}

TEST_CASE("representation names follow the encoder outputs") {
  CHECK(representation_names(EncoderConfig::desk_student({2, 4, 6})) ==
        std::vector<std::string>{"feat", "layer_1", "hid", "head_2", "head_4", "head_6"});
  CHECK(representation_names(EncoderConfig::desk_teacher()).size() == 7);
}

TEST_CASE("test split is a fixed hash fifth") {
  const Corpus c = generate_corpus(CorpusParams{});
  std::size_t held = 0;
  for (const auto& r : c.manifest.records) {
    CHECK(in_test_split(r.id) == (fnv(r.id) % 5 == 0));
    held += in_test_split(r.id);
  }
  const double frac = static_cast<double>(held) / c.size();
  CHECK(frac > 0.15);
  CHECK(frac < 0.25);
}

TEST_CASE("importance normalization") {
  const auto m = normalized_importance({0.25, 0.75}, {2.0, 1.0}, ImportanceOrder::multiply_then_normalize);
  CHECK(m[0] == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(m[1] == doctest::Approx(0.6).epsilon(1e-12));
  const auto d = normalized_importance({0.25, 0.75}, {2.0, 1.0}, ImportanceOrder::divide_then_normalize);
  CHECK(d[0] == doctest::Approx(1.0 / 7).epsilon(1e-12));
  CHECK(d[1] == doctest::Approx(6.0 / 7).epsilon(1e-12));
  CHECK(normalized_importance({1.0}, {3.5}, ImportanceOrder::multiply_then_normalize) == std::vector<double>{1.0});
  Rng rng(3);
  std::vector<double> w(5), n(5);
  for (double& x : w) x = rng.uniform(0.01, 1.0);
  for (double& x : n) x = rng.uniform(0.1, 5.0);
  const auto s = normalized_importance(w, n, ImportanceOrder::multiply_then_normalize);
  CHECK(std::accumulate(s.begin(), s.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("pooled features are frame means") {
  const Corpus c = probe_corpus();
  const Encoder s = build(EncoderConfig::desk_student({2}), 4);
  const UpstreamFeatures f = extract_features(s, c);
  REQUIRE(f.num_utterances() == c.size());
  REQUIRE(f.num_representations() == 4);
  const EncoderOutput out = s.forward(wave_tensor(c, 5, c.manifest.records[5].length));
  const std::size_t D = f.width;
  for (std::size_t r = 0; r < 4; ++r) {
    const Tensor& frames = r < 3 ? out.layers[r].frames : out.heads.at(2).frames;
    for (std::size_t d = 0; d < D; ++d) {
      double m = 0.0;
      for (std::size_t t = 0; t < frames.dim(0); ++t) m += frames.at(t * D + d);
      m /= static_cast<double>(frames.dim(0));
      CHECK(f.pooled[(5 * 4 + r) * D + d] == doctest::Approx(m).epsilon(1e-5));
    }
  }
}

TEST_CASE("probes are reproducible and leave the upstream untouched") {
  const Corpus c = probe_corpus();
  const Checkpoint ckpt = to_checkpoint(build(EncoderConfig::desk_student(), 4));
  const std::string before = checkpoint_digest(ckpt);
  ProbeConfig cfg;
  cfg.steps = 50;
  const auto task = probe_task(ProbeTaskKind::speaker, c.manifest);
  const ProbeResult a = train_probe(ckpt, c, task, cfg);
  const ProbeResult b = train_probe(ckpt, c, task, cfg);
  CHECK(checkpoint_digest(ckpt) == before);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.weights.logits == b.weights.logits);
  CHECK(a.n_train + a.n_test == c.size());
  CHECK(task.arity == 3);
  CHECK(accuracy_csv({a}) == accuracy_csv({b}));
  CHECK(accuracy_csv({a}).rfind("task,accuracy,steps,seed\nspeaker,", 0) == 0);

  cfg.shuffle_labels = true;
  const ProbeResult s = train_probe(ckpt, c, task, cfg);
  CHECK(accuracy_csv({s}).find("speaker_shuffled,") != std::string::npos);
}

TEST_CASE("probe errors") {
  CorpusParams p;
  p.n_speakers = 2;
  p.n_contents = 2;
  p.n_intents = 1;
  p.utterances_per_cell = 1;
  p.duration_s = 0.1;
  const Corpus c = generate_corpus(p);
  CHECK_THROWS_AS(probe_task(ProbeTaskKind::intent, c.manifest), DataError);
  const Checkpoint headless = to_checkpoint(build(EncoderConfig::desk_student(), 1));
  CHECK_THROWS_AS(analyze_layer_weights(headless, {ProbeTaskKind::speaker}, c, ProbeConfig{}), ProtocolError);
  CHECK(probe_task_kind_from_string("content") == ProbeTaskKind::content);
}

TEST_CASE("layer-weight analysis covers every representation") {
  const Corpus c = probe_corpus();
  const Checkpoint ckpt = to_checkpoint(build(EncoderConfig::desk_student({2, 4, 6}), 4));
  ProbeConfig cfg;
  cfg.steps = 20;
  const auto rows = analyze_layer_weights(ckpt, {ProbeTaskKind::speaker, ProbeTaskKind::content}, c, cfg);
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) {
    CHECK(r.names.size() == 6);
    CHECK(std::accumulate(r.importance.begin(), r.importance.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
  }
  const std::string csv = importance_csv(rows);
  CHECK(csv.rfind("task,representation,importance\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);
}

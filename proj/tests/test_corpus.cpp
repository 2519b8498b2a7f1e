#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "dkd/corpus.hpp"
#include "dkd/errors.hpp"

using namespace dkd;

namespace {

CorpusParams small() {
  CorpusParams p;
  p.n_speakers = 3;
  p.n_contents = 2;
  p.n_intents = 2;
  p.utterances_per_cell = 2;
  p.duration_s = 0.25;
  return p;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dkd_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("generation is deterministic") {
  const Corpus a = generate_corpus(small());
  const Corpus b = generate_corpus(small());
  CHECK(a.audio == b.audio);
  CHECK(manifest_jsonl(a.manifest) == manifest_jsonl(b.manifest));
  CorpusParams other = small();
  other.seed = 1;
  CHECK(generate_corpus(other).audio != a.audio);
}

TEST_CASE("utterances are finite, bounded and uniquely named") {
  const Corpus c = generate_corpus(small());
  std::set<std::string> ids;
  for (std::size_t i = 0; i < c.size(); ++i) {
    ids.insert(c.manifest.records[i].id);
    for (float x : c.samples(i)) {
      REQUIRE(std::isfinite(x));
      REQUIRE(std::abs(x) <= 1.0f);
    }
  }
  CHECK(ids.size() == c.size());
}

TEST_CASE("two speakers differ in fundamental by the configured spacing") {
  CorpusParams p;
  p.n_speakers = 2;
  p.n_contents = 1;
  p.n_intents = 1;
  p.utterances_per_cell = 1;
  p.f0_jitter = 0.0;
  p.noise_db = -80.0;
  const Corpus c = generate_corpus(p);
  REQUIRE(c.size() == 2);
  CHECK(p.speaker_f0(1) - p.speaker_f0(0) == p.speaker_spacing_hz);
  const double f0 = estimate_f0(c.samples(0), p.sample_rate);
  const double f1 = estimate_f0(c.samples(1), p.sample_rate);
  CHECK(std::abs((f1 - f0) - p.speaker_spacing_hz) < 2.0);
}

TEST_CASE("default desk corpus size") {
  const Corpus c = generate_corpus(CorpusParams{});
  CHECK(c.size() == 1024);
  CHECK(c.total_seconds() == doctest::Approx(1024.0));
  CHECK(c.total_seconds() / 60.0 == doctest::Approx(17.07).epsilon(0.01));
  std::map<int, int> spk, con, intent;
  for (const auto& r : c.manifest.records) {
    ++spk[r.speaker];
    ++con[r.content];
    ++intent[r.intent];
  }
  for (const auto& [k, n] : spk) CHECK(n == 128);
  for (const auto& [k, n] : con) CHECK(n == 128);
  for (const auto& [k, n] : intent) CHECK(n == 256);
}

TEST_CASE("mean fundamental separates speakers") {
  const Corpus c = generate_corpus(CorpusParams{});
  // nearest class mean of estimated f0, fitted on every other utterance
  std::map<int, std::pair<double, int>> sums;
  std::vector<double> f0(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    f0[i] = estimate_f0(c.samples(i), 16000);
    if (i % 2 == 0) {
      auto& s = sums[c.manifest.records[i].speaker];
      s.first += f0[i];
      ++s.second;
    }
  }
  int correct = 0, total = 0;
  for (std::size_t i = 1; i < c.size(); i += 2) {
    int best = -1;
    double dist = 1e300;
    for (const auto& [spk, s] : sums) {
      const double d = std::abs(f0[i] - s.first / s.second);
      if (d < dist) {
        dist = d;
        best = spk;
      }
    }
    correct += best == c.manifest.records[i].speaker;
    ++total;
  }
  CHECK(static_cast<double>(correct) / total > 0.9);
}

TEST_CASE("parameter validation") {
  CorpusParams p = small();
  p.duration_s = 0.02;
  CHECK_THROWS_AS(generate_corpus(p), ParameterError);
  p = small();
  p.n_speakers = 0;
  CHECK_THROWS_AS(generate_corpus(p), ParameterError);
}

TEST_CASE("batch iterator") {
  const Corpus c = generate_corpus(small());
  const std::size_t n = c.size();

  SUBCASE("one batch per epoch holds every id once") {
    BatchIterator it(c.manifest, n, 3, false);
    const auto b = it.next();
    REQUIRE(b.has_value());
    CHECK(std::set<std::size_t>(b->begin(), b->end()).size() == n);
    CHECK_FALSE(it.next().has_value());
  }
  SUBCASE("same seed gives the same order") {
    BatchIterator a(c.manifest, 4, 9, true), b(c.manifest, 4, 9, true), d(c.manifest, 4, 10, true);
    bool differs = false;
    for (int i = 0; i < 20; ++i) {
      const auto x = a.next(), y = b.next(), z = d.next();
      CHECK(*x == *y);
      differs |= *x != *z;
    }
    CHECK(differs);
  }
  SUBCASE("repeat delivers as many batches as asked") {
    const Corpus full = generate_corpus(CorpusParams{});
    BatchIterator it(full.manifest, 8, 0, true);
    int count = 0;
    for (int i = 0; i < 2000; ++i) count += it.next().has_value();
    CHECK(count == 2000);
    CHECK(it.epoch() >= 15);
  }
  SUBCASE("batch larger than the corpus is rejected") {
    CHECK_THROWS_AS(BatchIterator(c.manifest, n + 1, 0, true), ParameterError);
  }
}

TEST_CASE("save and load round-trip") {
  const Corpus c = generate_corpus(small());
  const auto dir = scratch("corpus");
  save_corpus(c, dir);
  CHECK(std::filesystem::exists(dir / "manifest.jsonl"));
  CHECK(std::filesystem::file_size(dir / "audio.f32") == c.audio.size() * 4);
  const Corpus r = load_corpus(dir);
  CHECK(r.audio == c.audio);
  CHECK(r.manifest.records == c.manifest.records);
  CHECK(r.manifest.seed == c.manifest.seed);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_corpus(dir), DataError);
}

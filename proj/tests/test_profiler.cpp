#include "doctest.h"
#include "dkd/profiler.hpp"

using namespace dkd;

namespace {

Corpus tiny() {
  CorpusParams p;
  p.n_speakers = 2;
  p.n_contents = 1;
  p.n_intents = 1;
  p.utterances_per_cell = 2;
  p.duration_s = 0.5;
  return generate_corpus(p);
}

}  // namespace

TEST_CASE("profile reports ratios against the first model") {
  const Corpus c = tiny();
  const std::vector<ProfiledModel> models{{"teacher", to_checkpoint(build(EncoderConfig::desk_teacher(), 1))},
                                          {"student", to_checkpoint(build(EncoderConfig::desk_student(), 1))}};
  const auto r = profile(models, c, 3);
  REQUIRE(r.size() == 2);
  CHECK(r[0].param_ratio == 1.0);
  CHECK(r[0].flop_ratio == 1.0);
  CHECK(r[0].speedup == 1.0);
  CHECK(r[1].params == count_params(EncoderConfig::desk_student()).total);
  CHECK(r[1].param_ratio == doctest::Approx(static_cast<double>(r[1].params) / r[0].params));
  CHECK(r[1].flop_ratio > 1.5);
  for (const auto& m : r) {
    CHECK(m.run_seconds.size() == 3);
    CHECK(m.batch_size == 1);
    CHECK(m.intra_op_threads == 1);
    double s = 0;
    for (double x : m.run_seconds) s += x;
    CHECK(m.mean_seconds == doctest::Approx(s / 3));
  }
  // FLOPs are per corpus pass
  std::int64_t f = 0;
  for (const auto& rec : c.manifest.records) f += count_flops(EncoderConfig::desk_student(), rec.length).total;
  CHECK(r[1].flops == f);

  const std::string csv = profile_csv(r);
  CHECK(csv.rfind("name,params,param_ratio,mean_seconds,speedup,flops,flop_ratio,runs,run_seconds,batch,threads\n", 0) == 0);
  const std::string table = profile_table(r);
  CHECK(table.find("# param.") != std::string::npos);
  CHECK(table.find("Inf. time") != std::string::npos);
  CHECK(table.find("FLOP ratio") != std::string::npos);
  CHECK(table.find("(100%)") != std::string::npos);
}

TEST_CASE("profile arguments") {
  const Corpus c = tiny();
  const std::vector<ProfiledModel> one{{"s", to_checkpoint(build(EncoderConfig::desk_student(), 1))}};
  CHECK_THROWS_AS(profile(one, c, 0), ParameterError);
  CHECK_THROWS_AS(profile(one, c, 1, 2), ParameterError);
  CHECK_THROWS_AS(profile({}, c, 1), ParameterError);
  CHECK_THROWS_AS(profile(one, Corpus{}, 1), DataError);
}

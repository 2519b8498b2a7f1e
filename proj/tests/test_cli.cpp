#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "dkd/checkpoint.hpp"
#include "dkd/cli.hpp"
#include "dkd/report.hpp"

using namespace dkd;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dkd_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Small corpus shared by the end-to-end cases.
fs::path small_corpus() {
  static const fs::path dir = [] {
    const fs::path d = fresh_dir("corpus");
    const Run r = cli({"gen-corpus", "--speakers", "3", "--contents", "2", "--intents", "2", "--per-cell", "2",
                       "--duration", "0.1", "--out", d.string()});
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(cli({}).code == 1);
  CHECK(cli({"no-such-command"}).code == 1);
  const Run r = cli({"distill", "--bogus"});
  CHECK(r.code == 1);
  CHECK_FALSE(r.err.empty());
  CHECK(cli({"strip-heads"}).code == 1);
}

TEST_CASE("layer lists") {
  CHECK(parse_layer_list("4,8,12") == std::vector<int>{4, 8, 12});
  CHECK(parse_layer_list("2") == std::vector<int>{2});
  CHECK_THROWS_AS(parse_layer_list("2.5"), SpecError);
  CHECK_THROWS_AS(parse_layer_list("4,,8"), SpecError);
  CHECK_THROWS_AS(parse_layer_list("x"), SpecError);
  CHECK_THROWS_AS(parse_layer_list(""), SpecError);
}

TEST_CASE("validation errors exit with 1 and name the problem") {
  const fs::path out = fresh_dir("bad");
  const Run r = cli({"distill", "--layers", "0", "--corpus", small_corpus().string(), "--out", out.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("layer 0") != std::string::npos);
  CHECK(cli({"distill", "--layers", "2,9", "--out", out.string()}).code == 1);
  CHECK(cli({"report", "--in", out.string(), "--fig", "pie"}).code == 1);
}

TEST_CASE("runtime failures exit with 2") {
  const fs::path out = fresh_dir("missing");
  CHECK(cli({"strip-heads", "--in", (out / "absent.dkd").string(), "--out", out.string()}).code == 2);
  std::ofstream(out / "broken.json") << "{ not json";
  CHECK(cli({"profile", "--config", (out / "broken.json").string(), "--out", out.string()}).code == 1);
}

TEST_CASE("config files") {
  const ExperimentConfig d = ExperimentConfig::desk();
  CHECK(experiment_config_from_json(to_json(d)).distill.predicted_layers == d.distill.predicted_layers);
  CHECK(ExperimentConfig::reference().teacher == EncoderConfig::reference_teacher());
  CHECK(ExperimentConfig::reference().train.total_updates == 200000);
  CHECK_THROWS_AS(experiment_config_from_json({{"mystery", 1}}), ConfigError);
  const ExperimentConfig partial = experiment_config_from_json({{"train", {{"total_updates", 7}}}});
  CHECK(partial.train.total_updates == 7);
  CHECK(partial.teacher == d.teacher);
}

TEST_CASE("distill, strip, probe and analyze end to end") {
  const fs::path run = fresh_dir("run");
  const std::string corpus = small_corpus().string();
  Run r = cli({"distill", "--layers", "2,4,6", "--steps", "3", "--batch", "4", "--corpus", corpus, "--out",
               run.string()});
  REQUIRE(r.code == 0);
  for (const char* f : {"student.dkd", "teacher.dkd", "train_log.csv", "run.json"}) CHECK(fs::exists(run / f));
  const auto meta = nlohmann::json::parse(slurp(run / "run.json"));
  CHECK(meta.at("predicted_layers") == std::vector<int>{2, 4, 6});
  CHECK(meta.at("total_updates") == 3);

  r = cli({"strip-heads", "--in", (run / "student.dkd").string(), "--out", run.string()});
  REQUIRE(r.code == 0);
  const Checkpoint stripped = load_checkpoint(run / "stripped.dkd");
  CHECK_FALSE(stripped.encoder.has_heads());
  r = cli({"strip-heads", "--in", (run / "stripped.dkd").string(), "--out", (run / "again").string()});
  CHECK(r.code == 0);
  CHECK(r.err.find("no prediction heads") != std::string::npos);

  r = cli({"probe", "--upstream", (run / "stripped.dkd").string(), "--corpus", corpus, "--task", "speaker,content",
           "--steps", "10", "--control", "--out", run.string()});
  REQUIRE(r.code == 0);
  const std::string acc = slurp(run / "probe_accuracy.csv");
  CHECK(acc.rfind("task,accuracy,steps,seed\n", 0) == 0);
  CHECK(acc.find("speaker,") != std::string::npos);
  CHECK(acc.find("content,") != std::string::npos);
  CHECK(acc.find("_shuffled,") != std::string::npos);
  CHECK(fs::exists(run / "probe_weights.csv"));

  r = cli({"analyze-layers", "--upstream", (run / "student.dkd").string(), "--corpus", corpus, "--task", "speaker",
           "--steps", "10", "--out", run.string()});
  REQUIRE(r.code == 0);
  CHECK(slurp(run / "layer_importance.csv").rfind("task,representation,importance\n", 0) == 0);
  CHECK(cli({"analyze-layers", "--upstream", (run / "stripped.dkd").string(), "--corpus", corpus, "--out",
             run.string()})
            .code == 1);
}

TEST_CASE("no-cos runs log an exactly zero cosine term") {
  const fs::path run = fresh_dir("nocos");
  REQUIRE(cli({"distill", "--no-cos", "--steps", "2", "--batch", "4", "--corpus", small_corpus().string(), "--out",
               run.string()})
              .code == 0);
  const CsvTable log = read_csv(run / "train_log.csv");
  std::size_t cos_cols = 0;
  for (std::size_t c = 0; c < log.header.size(); ++c) {
    if (log.header[c].rfind("loss_cos_", 0) != 0) continue;
    ++cos_cols;
    for (const auto& row : log.rows) CHECK(std::stod(row[c]) == 0.0);
  }
  CHECK(cos_cols == 3);
}

TEST_CASE("profile and grad-check") {
  const fs::path out = fresh_dir("prof");
  Run r = cli({"profile", "--runs", "1", "--limit", "2", "--corpus", small_corpus().string(), "--out", out.string()});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(out / "profile.csv"));
  CHECK(slurp(out / "profile.txt").find("FLOP ratio") != std::string::npos);
  CHECK(cli({"profile", "--batch", "4", "--out", out.string()}).code == 1);

  r = cli({"grad-check", "--shapes", "1", "--out", out.string()});
  CHECK(r.code == 0);
  CHECK(slurp(out / "grad_check.csv").rfind("op,input,shape,max_rel_error,mean_rel_error\n", 0) == 0);
  CHECK(cli({"grad-check", "--shapes", "1", "--tolerance", "0", "--out", out.string()}).code == 2);
}

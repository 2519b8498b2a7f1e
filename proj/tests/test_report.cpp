#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dkd/errors.hpp"
#include "dkd/report.hpp"
#include "json.hpp"

using namespace dkd;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void put(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << s;
}

void add_run(const fs::path& in, const std::string& name, std::vector<int> layers, double speaker, double content) {
  const nlohmann::json run{{"predicted_layers", layers}, {"params", 120000}, {"params_with_heads", 150000}};
  put(in / name / "run.json", run.dump(2));
  std::string log = "step,lr,loss_total,wall_ms\n";
  for (int s = 1; s <= 5; ++s) log += std::to_string(s) + ",0.001," + std::to_string(5.0 / s) + ",1.000\n";
  put(in / name / "train_log.csv", log);
  put(in / name / "probe_accuracy.csv", "task,accuracy,steps,seed\nspeaker," + std::to_string(speaker) +
                                            ",100,0\ncontent," + std::to_string(content) + ",100,0\n");
}

fs::path run_set() {
  const fs::path in = fs::temp_directory_path() / "dkd_report_in";
  fs::remove_all(in);
  add_run(in, "a", {4}, 0.5, 0.6);
  add_run(in, "b", {4, 8, 12}, 0.7, 0.8);
  add_run(in, "c", {8, 12}, 0.4, 0.9);
  put(in / "layer_importance.csv",
      "task,representation,importance\nspeaker,feat,0.5\nspeaker,hid,0.5\ncontent,feat,0.25\ncontent,hid,0.75\n");
  return in;
}

}  // namespace

TEST_CASE("figure names") {
  CHECK(report_figure_from_string("layer-sweep") == ReportFigure::layer_sweep);
  CHECK(to_string(ReportFigure::loss_curves) == "loss-curves");
  CHECK_THROWS_AS(report_figure_from_string("pie"), ParameterError);
}

TEST_CASE("csv parsing") {
  const CsvTable t = parse_csv("a,b\n1,2\n3,\n");
  CHECK(t.header == std::vector<std::string>{"a", "b"});
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[1][1].empty());
  CHECK(t.column("b") == 1);
  CHECK_THROWS_AS(t.column("c"), DataError);
}

TEST_CASE("every figure is emitted from a complete run set") {
  const fs::path in = run_set();
  const fs::path out = fs::temp_directory_path() / "dkd_report_out";
  fs::remove_all(out);
  const auto written = emit_report(in, ReportFigure::all, out);
  for (const char* f : {"layer_weights.csv", "layer_weights.svg", "size_accuracy.csv", "size_accuracy.svg",
                        "loss_curves.csv", "loss_curves.svg", "layer_sweep.csv", "layer_sweep.txt"}) {
    INFO(f);
    CHECK(fs::exists(out / f));
  }
  CHECK(written.size() == 8);
  CHECK(slurp(out / "layer_weights.svg").rfind("<svg", 0) == 0);

  // largest set first, then by size and lexicographic order
  const CsvTable sweep = read_csv(out / "layer_sweep.csv");
  REQUIRE(sweep.rows.size() == 3);
  CHECK(sweep.rows[0][0] == "4 8 12");
  CHECK(sweep.rows[1][0] == "4");
  CHECK(sweep.rows[2][0] == "8 12");
  const std::string txt = slurp(out / "layer_sweep.txt");
  CHECK(txt.find("Predicted Layers") != std::string::npos);
  CHECK(txt.find("70.00") != std::string::npos);

  // output depends only on the inputs
  const fs::path again = fs::temp_directory_path() / "dkd_report_again";
  fs::remove_all(again);
  emit_report(in, ReportFigure::all, again);
  for (const auto& p : written) CHECK(slurp(p) == slurp(again / p.filename()));
}

TEST_CASE("missing inputs are listed") {
  const fs::path empty = fs::temp_directory_path() / "dkd_report_empty";
  fs::remove_all(empty);
  fs::create_directories(empty);
  try {
    emit_report(empty, ReportFigure::layer_weights, empty / "out");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("layer_importance.csv") != std::string::npos);
  }
  CHECK_THROWS_AS(emit_report(empty, ReportFigure::layer_sweep, empty / "out"), DataError);
}

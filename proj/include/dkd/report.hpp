#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace dkd {

// Run-set layout read by the report tool:
//
//   <in>/layer_importance.csv        analyze-layers output (layer-weights)
//   <in>/<run>/train_log.csv         distill output (loss-curves)
//   <in>/<run>/run.json              distill output: predicted layers, params
//   <in>/<run>/probe_accuracy.csv    probe output written into the run dir
//
// Runs are the immediate subdirectories of <in>, visited in name order.
enum class ReportFigure { layer_weights, size_accuracy, loss_curves, layer_sweep, all };

ReportFigure report_figure_from_string(const std::string& name);
std::string to_string(ReportFigure fig);

// Writes CSV tables and SVG plots for `fig` into `out_dir` and returns the
// written paths. Output bytes depend only on the input files. Throws DataError
// listing every absent input when a figure cannot be built.
std::vector<std::filesystem::path> emit_report(const std::filesystem::path& in_dir, ReportFigure fig,
                                               const std::filesystem::path& out_dir);

// Minimal CSV reader for the files this library writes (no quoting).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Column index by name; throws DataError when absent.
  std::size_t column(const std::string& name) const;
};
CsvTable parse_csv(const std::string& text);
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace dkd

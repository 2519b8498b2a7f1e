#include "dkd/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "dkd/checkpoint.hpp"
#include "dkd/errors.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace dkd {

namespace {

constexpr const char* kImportanceFile = "layer_importance.csv";
constexpr const char* kTrainLogFile = "train_log.csv";
constexpr const char* kRunFile = "run.json";
constexpr const char* kAccuracyFile = "probe_accuracy.csv";

// Column order of accuracy tables: IC, SID and KS analogs.
const std::vector<std::string> kTaskOrder{"intent", "speaker", "content"};

std::string num(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '&':
        out += "&amp;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

std::string slurp(const fs::path& p) {
  const auto bytes = read_file(p);
  return std::string(bytes.begin(), bytes.end());
}

void put(const fs::path& p, const std::string& text, std::vector<fs::path>& written) {
  write_file(p, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  written.push_back(p);
}

std::vector<fs::path> run_dirs(const fs::path& in) {
  std::vector<fs::path> dirs;
  if (fs::is_directory(in)) {
    for (const auto& e : fs::directory_iterator(in)) {
      if (e.is_directory()) {
        dirs.push_back(e.path());
      }
    }
  }
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

[[noreturn]] void missing(const std::string& fig, const std::vector<std::string>& files) {
  std::string msg = "report " + fig + ": missing required inputs:";
  for (const auto& f : files) {
    msg += "\n  " + f;
  }
  throw DataError(msg);
}

struct Svg {
  double w;
  double h;
  std::ostringstream body;

  std::string str() const {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w, 0) << "\" height=\"" << num(h, 0)
       << "\" viewBox=\"0 0 " << num(w, 0) << ' ' << num(h, 0) << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << body.str() << "</svg>\n";
    return os.str();
  }
  void text(double x, double y, const std::string& s, const std::string& anchor = "start") {
    body << "<text x=\"" << num(x, 1) << "\" y=\"" << num(y, 1) << "\" text-anchor=\"" << anchor << "\">"
         << xml_escape(s) << "</text>\n";
  }
  void line(double x1, double y1, double x2, double y2) {
    body << "<line x1=\"" << num(x1, 1) << "\" y1=\"" << num(y1, 1) << "\" x2=\"" << num(x2, 1) << "\" y2=\""
         << num(y2, 1) << "\" stroke=\"black\"/>\n";
  }
};

const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
                                 "#7f7f7f"};
  return colors[i % 8];
}

// Axes with min/max labels; maps data to the plot box.
struct Axes {
  double x0, x1, y0, y1;
  double left = 60, top = 30, width = 420, height = 260;

  double px(double x) const { return left + (x1 > x0 ? (x - x0) / (x1 - x0) : 0.5) * width; }
  double py(double y) const { return top + height - (y1 > y0 ? (y - y0) / (y1 - y0) : 0.5) * height; }
  void draw(Svg& svg, const std::string& xlabel, const std::string& ylabel, int digits) const {
    svg.line(left, top + height, left + width, top + height);
    svg.line(left, top, left, top + height);
    svg.text(left, top + height + 14, num(x0, digits), "middle");
    svg.text(left + width, top + height + 14, num(x1, digits), "middle");
    svg.text(left - 4, top + height, num(y0, digits), "end");
    svg.text(left - 4, top + 8, num(y1, digits), "end");
    svg.text(left + width / 2, top + height + 30, xlabel, "middle");
    svg.text(14, top + height / 2, ylabel, "middle");
  }
};

void layer_weights(const fs::path& in, const fs::path& out, std::vector<fs::path>& written) {
  fs::path src = in / kImportanceFile;
  if (!fs::exists(src)) {
    for (const auto& d : run_dirs(in)) {
      if (fs::exists(d / kImportanceFile)) {
        src = d / kImportanceFile;
        break;
      }
    }
  }
  if (!fs::exists(src)) {
    missing("layer-weights", {(in / kImportanceFile).string()});
  }
  const CsvTable t = read_csv(src);
  const std::size_t ct = t.column("task"), cr = t.column("representation"), ci = t.column("importance");
  std::vector<std::string> tasks;
  std::vector<std::string> reps;
  std::map<std::pair<std::string, std::string>, double> cell;
  for (const auto& row : t.rows) {
    if (std::find(tasks.begin(), tasks.end(), row[ct]) == tasks.end()) {
      tasks.push_back(row[ct]);
    }
    if (std::find(reps.begin(), reps.end(), row[cr]) == reps.end()) {
      reps.push_back(row[cr]);
    }
    cell[{row[ct], row[cr]}] = std::stod(row[ci]);
  }
  std::ostringstream csv;
  csv << "task";
  for (const auto& r : reps) {
    csv << ',' << r;
  }
  csv << '\n';
  for (const auto& task : tasks) {
    csv << task;
    for (const auto& r : reps) {
      auto it = cell.find({task, r});
      csv << ',' << (it == cell.end() ? std::string() : num(it->second, 6));
    }
    csv << '\n';
  }
  put(out / "layer_weights.csv", csv.str(), written);

  const double cw = 56, chh = 28, left = 80, top = 40;
  Svg svg{left + cw * static_cast<double>(reps.size()) + 20, top + chh * static_cast<double>(tasks.size()) + 40, {}};
  svg.text(left, 20, "Normalized layer importance per task");
  for (std::size_t j = 0; j < reps.size(); ++j) {
    svg.text(left + cw * (static_cast<double>(j) + 0.5), top - 6, reps[j], "middle");
  }
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const double y = top + chh * static_cast<double>(i);
    svg.text(left - 6, y + chh / 2 + 4, tasks[i], "end");
    double mx = 0.0;
    for (const auto& r : reps) {
      auto it = cell.find({tasks[i], r});
      mx = std::max(mx, it == cell.end() ? 0.0 : it->second);
    }
    for (std::size_t j = 0; j < reps.size(); ++j) {
      auto it = cell.find({tasks[i], reps[j]});
      const double v = it == cell.end() ? 0.0 : it->second;
      const int shade = static_cast<int>(std::lround(255.0 - 200.0 * (mx > 0 ? v / mx : 0.0)));
      std::ostringstream fill;
      fill << "rgb(" << shade << ',' << shade << ",255)";
      svg.body << "<rect x=\"" << num(left + cw * static_cast<double>(j), 1) << "\" y=\"" << num(y, 1)
               << "\" width=\"" << num(cw, 1) << "\" height=\"" << num(chh, 1) << "\" fill=\"" << fill.str()
               << "\" stroke=\"white\"/>\n";
      svg.text(left + cw * (static_cast<double>(j) + 0.5), y + chh / 2 + 4, num(v, 3), "middle");
    }
  }
  put(out / "layer_weights.svg", svg.str(), written);
}

struct RunInfo {
  std::string name;
  nlohmann::json run;
  std::map<std::string, double> accuracy;
};

std::vector<RunInfo> runs_with(const fs::path& in, bool need_accuracy, const std::string& fig) {
  std::vector<RunInfo> runs;
  for (const auto& d : run_dirs(in)) {
    if (!fs::exists(d / kRunFile) || (need_accuracy && !fs::exists(d / kAccuracyFile))) {
      continue;
    }
    RunInfo r;
    r.name = d.filename().string();
    try {
      r.run = nlohmann::json::parse(slurp(d / kRunFile));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("report: " + (d / kRunFile).string() + ": " + e.what());
    }
    if (fs::exists(d / kAccuracyFile)) {
      const CsvTable t = read_csv(d / kAccuracyFile);
      const std::size_t ct = t.column("task"), ca = t.column("accuracy");
      for (const auto& row : t.rows) {
        r.accuracy[row[ct]] = std::stod(row[ca]);
      }
    }
    runs.push_back(std::move(r));
  }
  if (runs.empty()) {
    std::vector<std::string> req{(in / "<run>" / kRunFile).string()};
    if (need_accuracy) {
      req.push_back((in / "<run>" / kAccuracyFile).string());
    }
    missing(fig, req);
  }
  return runs;
}

std::vector<std::string> task_columns(const std::vector<RunInfo>& runs) {
  std::vector<std::string> cols;
  for (const auto& task : kTaskOrder) {
    for (const auto& r : runs) {
      if (r.accuracy.count(task)) {
        cols.push_back(task);
        break;
      }
    }
  }
  return cols;
}

std::string layers_label(const nlohmann::json& run) {
  std::string s;
  for (const auto& l : run.at("predicted_layers")) {
    s += (s.empty() ? "" : ", ") + std::to_string(l.get<int>());
  }
  return s;
}

void size_accuracy(const fs::path& in, const fs::path& out, std::vector<fs::path>& written) {
  const auto runs = runs_with(in, true, "size-accuracy");
  const auto tasks = task_columns(runs);
  std::ostringstream csv;
  csv << "run,params,task,accuracy\n";
  double xmin = 1e300, xmax = -1e300;
  for (const auto& r : runs) {
    const double p = r.run.value("params", 0.0);
    xmin = std::min(xmin, p / 1e6);
    xmax = std::max(xmax, p / 1e6);
    for (const auto& task : tasks) {
      if (r.accuracy.count(task)) {
        csv << r.name << ',' << static_cast<std::int64_t>(p) << ',' << task << ',' << num(r.accuracy.at(task), 6)
            << '\n';
      }
    }
  }
  put(out / "size_accuracy.csv", csv.str(), written);

  Axes ax{xmin, xmax, 0.0, 1.0};
  if (xmax - xmin < 1e-9) {
    ax.x0 = xmin * 0.9;
    ax.x1 = xmax * 1.1 + 1e-6;
  }
  Svg svg{560, 340, {}};
  svg.text(ax.left, 18, "Probe accuracy vs parameters");
  ax.draw(svg, "parameters (M)", "accuracy", 3);
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    svg.text(ax.left + ax.width + 8, ax.top + 14.0 * static_cast<double>(k), tasks[k]);
    svg.body << "<circle cx=\"" << num(ax.left + ax.width + 4, 1) << "\" cy=\""
             << num(ax.top - 4 + 14.0 * static_cast<double>(k), 1) << "\" r=\"3\" fill=\"" << palette(k) << "\"/>\n";
    for (const auto& r : runs) {
      if (!r.accuracy.count(tasks[k])) {
        continue;
      }
      const double x = ax.px(r.run.value("params", 0.0) / 1e6), y = ax.py(r.accuracy.at(tasks[k]));
      svg.body << "<circle cx=\"" << num(x, 1) << "\" cy=\"" << num(y, 1) << "\" r=\"4\" fill=\"" << palette(k)
               << "\"><title>" << xml_escape(r.name) << "</title></circle>\n";
    }
  }
  put(out / "size_accuracy.svg", svg.str(), written);
}

void loss_curves(const fs::path& in, const fs::path& out, std::vector<fs::path>& written) {
  std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> curves;
  for (const auto& d : run_dirs(in)) {
    if (!fs::exists(d / kTrainLogFile)) {
      continue;
    }
    const CsvTable t = read_csv(d / kTrainLogFile);
    const std::size_t cs = t.column("step"), cl = t.column("loss_total");
    std::vector<std::pair<double, double>> pts;
    for (const auto& row : t.rows) {
      pts.emplace_back(std::stod(row[cs]), std::stod(row[cl]));
    }
    curves.emplace_back(d.filename().string(), std::move(pts));
  }
  if (curves.empty()) {
    missing("loss-curves", {(in / "<run>" / kTrainLogFile).string()});
  }
  std::ostringstream csv;
  csv << "run,step,loss_total\n";
  double xmax = 1, ymin = 1e300, ymax = -1e300;
  for (const auto& [name, pts] : curves) {
    for (const auto& [s, l] : pts) {
      csv << name << ',' << static_cast<std::int64_t>(s) << ',' << num(l, 6) << '\n';
      xmax = std::max(xmax, s);
      ymin = std::min(ymin, l);
      ymax = std::max(ymax, l);
    }
  }
  put(out / "loss_curves.csv", csv.str(), written);

  Axes ax{0.0, xmax, std::min(0.0, ymin), ymax > ymin ? ymax : ymin + 1.0};
  Svg svg{620, 340, {}};
  svg.text(ax.left, 18, "Training loss");
  ax.draw(svg, "step", "loss_total", 2);
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const auto& [name, pts] = curves[k];
    svg.body << "<polyline fill=\"none\" stroke=\"" << palette(k) << "\" points=\"";
    // At most ~500 vertices per curve.
    const std::size_t stride = std::max<std::size_t>(1, pts.size() / 500);
    for (std::size_t i = 0; i < pts.size(); i += stride) {
      svg.body << (i ? " " : "") << num(ax.px(pts[i].first), 1) << ',' << num(ax.py(pts[i].second), 1);
    }
    svg.body << "\"/>\n";
    svg.text(ax.left + ax.width + 8, ax.top + 14.0 * static_cast<double>(k), name);
  }
  put(out / "loss_curves.svg", svg.str(), written);
}

void layer_sweep(const fs::path& in, const fs::path& out, std::vector<fs::path>& written) {
  auto runs = runs_with(in, true, "layer-sweep");
  for (const auto& r : runs) {
    if (!r.run.contains("predicted_layers")) {
      throw DataError("report layer-sweep: " + (in / r.name / kRunFile).string() + " lacks predicted_layers");
    }
  }
  // Largest layer set first, then by size and lexicographic order.
  auto key = [](const RunInfo& r) { return r.run.at("predicted_layers").get<std::vector<int>>(); };
  std::stable_sort(runs.begin(), runs.end(), [&](const RunInfo& a, const RunInfo& b) {
    const auto ka = key(a), kb = key(b);
    return ka.size() != kb.size() ? ka.size() < kb.size() : ka < kb;
  });
  std::size_t largest = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (key(runs[i]).size() > key(runs[largest]).size()) {
      largest = i;
    }
  }
  std::rotate(runs.begin(), runs.begin() + static_cast<std::ptrdiff_t>(largest),
              runs.begin() + static_cast<std::ptrdiff_t>(largest) + 1);

  const auto tasks = task_columns(runs);
  std::ostringstream csv;
  csv << "predicted_layers";
  for (const auto& t : tasks) {
    csv << ',' << t;
  }
  csv << '\n';
  std::vector<std::vector<std::string>> table;
  table.push_back({"Predicted Layers"});
  for (const auto& t : tasks) {
    table.front().push_back(t + " acc");
  }
  for (const auto& r : runs) {
    std::vector<std::string> row{layers_label(r.run)};
    std::string joined;
    for (int l : key(r)) {
      joined += (joined.empty() ? "" : " ") + std::to_string(l);
    }
    csv << joined;
    for (const auto& t : tasks) {
      const std::string v = r.accuracy.count(t) ? num(100.0 * r.accuracy.at(t), 2) : "-";
      csv << ',' << (r.accuracy.count(t) ? num(r.accuracy.at(t), 6) : "");
      row.push_back(v);
    }
    csv << '\n';
    table.push_back(std::move(row));
  }
  put(out / "layer_sweep.csv", csv.str(), written);

  std::vector<std::size_t> width(table.front().size(), 0);
  for (const auto& row : table) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      width[c] = std::max(width[c], row[c].size());
    }
  }
  std::ostringstream txt;
  for (std::size_t i = 0; i < table.size(); ++i) {
    std::string line;
    for (std::size_t c = 0; c < table[i].size(); ++c) {
      std::ostringstream cell;
      cell << (c == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[c])) << table[i][c];
      line += (c ? " | " : "") + cell.str();
    }
    line.erase(line.find_last_not_of(' ') + 1);
    txt << line << '\n';
    if (i == 0 || i == 1) {
      std::string rule;
      for (std::size_t c = 0; c < width.size(); ++c) {
        rule += (c ? "-+-" : "") + std::string(width[c], '-');
      }
      txt << rule << '\n';
    }
  }
  put(out / "layer_sweep.txt", txt.str(), written);
}

}  // namespace

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) {
      return i;
    }
  }
  throw DataError("csv: no column '" + name + "'");
}

CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) {
      cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
      cells.emplace_back();
    }
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) {
    throw DataError("csv: empty input");
  }
  t.header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    auto row = split(line);
    if (row.size() != t.header.size()) {
      throw DataError("csv: row has " + std::to_string(row.size()) + " cells, header has " +
                      std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

CsvTable read_csv(const fs::path& path) {
  try {
    return parse_csv(slurp(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

ReportFigure report_figure_from_string(const std::string& name) {
  if (name == "layer-weights") {
    return ReportFigure::layer_weights;
  }
  if (name == "size-accuracy") {
    return ReportFigure::size_accuracy;
  }
  if (name == "loss-curves") {
    return ReportFigure::loss_curves;
  }
  if (name == "layer-sweep") {
    return ReportFigure::layer_sweep;
  }
  if (name == "all") {
    return ReportFigure::all;
  }
  throw ParameterError("unknown figure '" + name +
                       "' (expected layer-weights, size-accuracy, loss-curves, layer-sweep or all)");
}

std::string to_string(ReportFigure fig) {
  switch (fig) {
    case ReportFigure::layer_weights:
      return "layer-weights";
    case ReportFigure::size_accuracy:
      return "size-accuracy";
    case ReportFigure::loss_curves:
      return "loss-curves";
    case ReportFigure::layer_sweep:
      return "layer-sweep";
    case ReportFigure::all:
      return "all";
  }
  return "unknown";
}

std::vector<fs::path> emit_report(const fs::path& in_dir, ReportFigure fig, const fs::path& out_dir) {
  if (!fs::is_directory(in_dir)) {
    throw DataError("report: input directory " + in_dir.string() + " does not exist");
  }
  std::vector<fs::path> written;
  switch (fig) {
    case ReportFigure::layer_weights:
      layer_weights(in_dir, out_dir, written);
      break;
    case ReportFigure::size_accuracy:
      size_accuracy(in_dir, out_dir, written);
      break;
    case ReportFigure::loss_curves:
      loss_curves(in_dir, out_dir, written);
      break;
    case ReportFigure::layer_sweep:
      layer_sweep(in_dir, out_dir, written);
      break;
    case ReportFigure::all: {
      // Every figure whose inputs exist; fails only if none can be built.
      std::vector<std::string> errors;
      for (auto f : {layer_weights, size_accuracy, loss_curves, layer_sweep}) {
        try {
          f(in_dir, out_dir, written);
        } catch (const DataError& e) {
          errors.emplace_back(e.what());
        }
      }
      if (written.empty()) {
        std::string msg = "report all: no figure could be built";
        for (const auto& e : errors) {
          msg += "\n" + e;
        }
        throw DataError(msg);
      }
      break;
    }
  }
  return written;
}

}  // namespace dkd

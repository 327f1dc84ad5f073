#include "pemp/report.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "json.hpp"

namespace pemp {

using nlohmann::json;

EvalReport make_report(const std::string& label, const RunConfig& config, const FoldSplit& split,
                       const ProtocolResult& result) {
  EvalReport r;
  r.label = label;
  r.fold = split.fold;
  r.shots = config.shots;
  r.novel_classes = split.novel_classes;
  r.per_class = result.per_class;
  for (const auto& run : result.runs) {
    r.run_mean_iou.push_back(run.mean_iou);
    r.run_binary_iou.push_back(run.binary_iou);
  }
  r.mean_iou = result.mean_iou;
  r.mean_iou_std = result.mean_iou_std;
  r.binary_iou = result.binary_iou;
  r.binary_iou_std = result.binary_iou_std;
  r.runtime_seconds = result.seconds;
  r.config_hash = config.hash();
  r.config = config.to_map();
  return r;
}

std::string report_to_json(const EvalReport& r) {
  json per_class = json::object();
  for (const auto& [c, v] : r.per_class) per_class[std::to_string(c)] = v;
  json j = {
      {"label", r.label},
      {"fold", r.fold},
      {"shots", r.shots},
      {"novel_classes", r.novel_classes},
      {"per_class_iou", per_class},
      {"runs", {{"mean_iou", r.run_mean_iou}, {"binary_iou", r.run_binary_iou}}},
      {"mean_iou", {{"mean", r.mean_iou}, {"std", r.mean_iou_std}}},
      {"binary_iou", {{"mean", r.binary_iou}, {"std", r.binary_iou_std}}},
      {"runtime_seconds", r.runtime_seconds},
      {"config_hash", r.config_hash},
      {"config", r.config},
  };
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
    EvalReport r;
    r.label = j.at("label").get<std::string>();
    r.fold = j.at("fold").get<int>();
    r.shots = j.at("shots").get<int>();
    r.novel_classes = j.at("novel_classes").get<std::vector<int>>();
    for (const auto& [k, v] : j.at("per_class_iou").items()) r.per_class[std::stoi(k)] = v.get<double>();
    r.run_mean_iou = j.at("runs").at("mean_iou").get<std::vector<double>>();
    r.run_binary_iou = j.at("runs").at("binary_iou").get<std::vector<double>>();
    r.mean_iou = j.at("mean_iou").at("mean").get<double>();
    r.mean_iou_std = j.at("mean_iou").at("std").get<double>();
    r.binary_iou = j.at("binary_iou").at("mean").get<double>();
    r.binary_iou_std = j.at("binary_iou").at("std").get<double>();
    r.runtime_seconds = j.at("runtime_seconds").get<double>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.config = j.at("config").get<std::map<std::string, std::string>>();
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
}

namespace {

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v;
  return os.str();
}

}  // namespace

std::string format_table(const std::vector<EvalReport>& reports) {
  std::vector<std::string> labels;
  std::set<int> folds;
  std::map<std::pair<std::string, int>, std::map<int, double>> cells;
  for (const auto& r : reports) {
    if (std::find(labels.begin(), labels.end(), r.label) == labels.end()) labels.push_back(r.label);
    folds.insert(r.fold);
    cells[{r.label, r.shots}][r.fold] = r.mean_iou;
  }

  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"Method", "Shot"};
  for (int f : folds) header.push_back("split-" + std::to_string(f));
  header.push_back("Mean");
  rows.push_back(header);

  auto row_mean = [](const std::map<int, double>& m) {
    double s = 0.0;
    for (const auto& [_, v] : m) s += v;
    return m.empty() ? 0.0 : s / static_cast<double>(m.size());
  };
  for (const auto& label : labels) {
    std::set<int> shots;
    for (const auto& [key, _] : cells) {
      if (key.first == label) shots.insert(key.second);
    }
    for (int k : shots) {
      const auto& m = cells[{label, k}];
      std::vector<std::string> row{label, std::to_string(k)};
      for (int f : folds) row.push_back(m.count(f) ? pct(m.at(f)) : "-");
      row.push_back(pct(row_mean(m)));
      rows.push_back(row);
    }
    if (shots.count(1) && shots.count(5)) {
      const double d = row_mean(cells[{label, 5}]) - row_mean(cells[{label, 1}]);
      std::vector<std::string> row{label, "delta"};
      for (std::size_t i = 0; i < folds.size(); ++i) row.push_back("");
      row.push_back((d >= 0 ? "+" : "") + pct(d));
      rows.push_back(row);
    }
  }

  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], row[i].size());
  }
  std::ostringstream os;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) os << "  ";
      if (i < 2) {
        os << std::left << std::setw(static_cast<int>(widths[i])) << row[i];
      } else {
        os << std::right << std::setw(static_cast<int>(widths[i])) << row[i];
      }
    }
    os << "\n";
  }
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing file: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace pemp

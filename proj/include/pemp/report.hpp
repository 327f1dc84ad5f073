#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pemp/evaluate.hpp"

namespace pemp {

struct EvalReport {
  std::string label = "PEMP";
  int fold = 0;
  int shots = 1;
  std::vector<int> novel_classes;
  std::map<int, double> per_class;
  std::vector<double> run_mean_iou;
  std::vector<double> run_binary_iou;
  double mean_iou = 0.0;
  double mean_iou_std = 0.0;
  double binary_iou = 0.0;
  double binary_iou_std = 0.0;
  double runtime_seconds = 0.0;
  std::string config_hash;
  std::map<std::string, std::string> config;

  bool operator==(const EvalReport&) const = default;
};

EvalReport make_report(const std::string& label, const RunConfig& config, const FoldSplit& split,
                       const ProtocolResult& result);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

/// Aligned table with one row per (label, shots), fold columns, Mean, and a
/// delta row when both 1-shot and 5-shot rows exist for a label.
std::string format_table(const std::vector<EvalReport>& reports);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace pemp

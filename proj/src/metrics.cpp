#include "pemp/metrics.hpp"

namespace pemp {

IouCounts iou_counts(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) {
    throw DimensionError("iou: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  }
  IouCounts c;
  const auto p = pred.data();
  const auto g = gt.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool a = p[i] >= 0.5;
    const bool b = g[i] >= 0.5;
    c.intersection += (a && b) ? 1.0 : 0.0;
    c.union_ += (a || b) ? 1.0 : 0.0;
  }
  return c;
}

double iou(const Tensor& pred, const Tensor& gt) { return iou_counts(pred, gt).value(); }

void IouAccumulator::add(int class_id, const Tensor& pred, const Tensor& gt) {
  const IouCounts fg = iou_counts(pred, gt);
  const double total = static_cast<double>(pred.numel());
  // Background counts follow from the foreground ones.
  IouCounts bg;
  bg.intersection = total - fg.union_;
  bg.union_ = total - fg.intersection;
  add_counts(class_id, fg, bg);
}

void IouAccumulator::add_counts(int class_id, const IouCounts& fg, const IouCounts& bg) {
  auto& c = per_class_[class_id];
  c.intersection += fg.intersection;
  c.union_ += fg.union_;
  fg_.intersection += fg.intersection;
  fg_.union_ += fg.union_;
  bg_.intersection += bg.intersection;
  bg_.union_ += bg.union_;
  ++episodes_;
}

double IouAccumulator::mean_iou(const std::vector<int>& classes) const {
  if (classes.empty()) throw DataError("mean_iou: no classes");
  double s = 0.0;
  for (int c : classes) {
    auto it = per_class_.find(c);
    if (it == per_class_.end()) throw DataError("mean_iou: class " + std::to_string(c) + " has no episodes");
    s += it->second.value();
  }
  return s / static_cast<double>(classes.size());
}

double IouAccumulator::mean_iou() const {
  std::vector<int> classes;
  for (const auto& [c, _] : per_class_) classes.push_back(c);
  return mean_iou(classes);
}

double IouAccumulator::binary_iou() const { return 0.5 * (fg_.value() + bg_.value()); }

std::map<int, double> IouAccumulator::per_class() const {
  std::map<int, double> out;
  for (const auto& [c, counts] : per_class_) out[c] = counts.value();
  return out;
}

}  // namespace pemp

#pragma once

#include <map>

#include "pemp/tensor.hpp"

namespace pemp {

struct IouCounts {
  double intersection = 0.0;
  double union_ = 0.0;

  /// 1 when the union is empty.
  double value() const { return union_ > 0.0 ? intersection / union_ : 1.0; }
};

/// Counts for binary masks of identical shape (pixels >= 0.5 are set).
IouCounts iou_counts(const Tensor& pred, const Tensor& gt);
double iou(const Tensor& pred, const Tensor& gt);

/// Sums intersection/union counts per class and over FG/BG across episodes.
class IouAccumulator {
 public:
  void add(int class_id, const Tensor& pred, const Tensor& gt);
  void add_counts(int class_id, const IouCounts& fg, const IouCounts& bg);

  /// Unweighted mean over classes of class-aggregated IoU. Throws DataError
  /// when `classes` lists a class without episodes.
  double mean_iou(const std::vector<int>& classes) const;
  double mean_iou() const;
  /// Mean of the foreground and background IoU over all episodes.
  double binary_iou() const;
  std::map<int, double> per_class() const;
  std::size_t episodes() const { return episodes_; }

 private:
  std::map<int, IouCounts> per_class_;
  IouCounts fg_;
  IouCounts bg_;
  std::size_t episodes_ = 0;
};

}  // namespace pemp

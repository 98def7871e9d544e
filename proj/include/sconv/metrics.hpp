#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "sconv/tensor.hpp"

namespace sconv {

// counts(i, j): pixels with ground truth i predicted as j.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int num_classes);

  // Pixels whose ground truth equals ignore_label are skipped.
  void accumulate(const LabelMap& pred, const LabelMap& gt, int ignore_label);
  void merge(const ConfusionMatrix& other);

  int num_classes() const { return n_; }
  std::uint64_t at(int gt, int pred) const { return counts_[gt * n_ + pred]; }
  std::uint64_t total() const;
  std::uint64_t gt_count(int c) const;
  std::uint64_t pred_count(int c) const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int n_ = 0;
  std::vector<std::uint64_t> counts_;
};

struct SegMetrics {
  double acc = 0;
  double macc = 0;
  double miou = 0;
  // NaN where the class is excluded (absent from ground truth and
  // predictions).
  std::vector<double> per_class_iou;
};

// Acc = sum p_ii / g; mAcc averages p_ii / g_i over classes with g_i > 0;
// mIoU averages p_ii / (g_i + sum_j p_ji - p_ii) over classes present in
// ground truth or predictions.
SegMetrics compute_metrics(const ConfusionMatrix& cm);

nlohmann::json metrics_to_json(const SegMetrics& m);
void write_metrics_json(const SegMetrics& m, const std::filesystem::path& path);

}  // namespace sconv

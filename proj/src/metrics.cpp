#include "sconv/metrics.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/format.h>

namespace sconv {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : n_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 1) fail(ErrorKind::config, "confusion matrix needs >= 1 class");
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt, int ignore_label) {
  check_shape(pred, gt.shape(), "confusion matrix prediction");
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    const int g = gt[i];
    if (g == ignore_label) continue;
    const int p = pred[i];
    if (g < 0 || g >= n_ || p < 0 || p >= n_) {
      fail(ErrorKind::data, fmt::format("class id out of range: gt={} pred={} (classes={})", g, p, n_));
    }
    ++counts_[static_cast<std::size_t>(g) * n_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) fail(ErrorKind::dimension, "cannot merge confusion matrices of different size");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto v : counts_) t += v;
  return t;
}

std::uint64_t ConfusionMatrix::gt_count(int c) const {
  std::uint64_t t = 0;
  for (int j = 0; j < n_; ++j) t += at(c, j);
  return t;
}

std::uint64_t ConfusionMatrix::pred_count(int c) const {
  std::uint64_t t = 0;
  for (int i = 0; i < n_; ++i) t += at(i, c);
  return t;
}

SegMetrics compute_metrics(const ConfusionMatrix& cm) {
  const std::uint64_t g = cm.total();
  if (g == 0) fail(ErrorKind::metric, "confusion matrix is empty");
  SegMetrics m;
  const int n = cm.num_classes();
  m.per_class_iou.assign(n, std::numeric_limits<double>::quiet_NaN());
  std::uint64_t diag = 0;
  double acc_sum = 0, iou_sum = 0;
  int acc_classes = 0, iou_classes = 0;
  for (int c = 0; c < n; ++c) {
    const std::uint64_t tp = cm.at(c, c), gi = cm.gt_count(c), pj = cm.pred_count(c);
    diag += tp;
    if (gi > 0) {
      acc_sum += static_cast<double>(tp) / static_cast<double>(gi);
      ++acc_classes;
    }
    if (gi > 0 || pj > 0) {
      const double iou = static_cast<double>(tp) / static_cast<double>(gi + pj - tp);
      m.per_class_iou[c] = iou;
      iou_sum += iou;
      ++iou_classes;
    }
  }
  m.acc = static_cast<double>(diag) / static_cast<double>(g);
  m.macc = acc_sum / acc_classes;
  m.miou = iou_sum / iou_classes;
  return m;
}

namespace {
double round6(double v) { return std::round(v * 1e6) / 1e6; }
}  // namespace

nlohmann::json metrics_to_json(const SegMetrics& m) {
  nlohmann::json j;
  j["acc"] = round6(m.acc);
  j["macc"] = round6(m.macc);
  j["miou"] = round6(m.miou);
  auto per = nlohmann::json::array();
  for (double v : m.per_class_iou) {
    if (std::isnan(v)) {
      per.push_back(nullptr);
    } else {
      per.push_back(round6(v));
    }
  }
  j["per_class"] = per;
  return j;
}

void write_metrics_json(const SegMetrics& m, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::io, "cannot write " + path.string());
  os << metrics_to_json(m).dump(2) << "\n";
}

}  // namespace sconv

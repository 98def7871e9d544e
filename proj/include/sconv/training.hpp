#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sconv/data_io.hpp"
#include "sconv/metrics.hpp"
#include "sconv/sgnet.hpp"

namespace sconv {

struct TrainConfig {
  double base_lr = 5e-3;
  double poly_power = 0.9;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  int batch_size = 4;
  int epochs = 10;
  int crop_h = 64;
  int crop_w = 64;
  double scale_min = 0.75;
  double scale_max = 1.25;
  double hflip_prob = 0.5;
  bool augment = true;
  double aux_weight = 0.4;
  // Learning-rate multiplier for the offset generators (eta).
  double offset_lr_mult = 1e-3;
  bool class_reweight = false;
  // "iteration": poly decay every step. "epoch": lr held constant over
  // blocks of lr_step_epochs epochs.
  std::string lr_step_granularity = "iteration";
  int lr_step_epochs = 40;
  // Stop after this many optimizer steps (0 = epochs * steps_per_epoch).
  long max_iters = 0;
  // Use only the first n training samples (0 = all).
  int train_subset = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

double poly_lr(long iter, long max_iter, double base_lr, double power);

// lr for the configured granularity.
double scheduled_lr(const TrainConfig& cfg, long iter, long max_iter, long steps_per_epoch);

template <typename T>
struct SgdState {
  std::vector<Tensor<T>> velocity;  // mirrors the parameter registry
  long iteration = 0;
};

// v = momentum * v + grad + wd * param (wd only when param.decay);
// param -= lr * param.lr_mult * v.
template <typename T>
void sgd_step(const std::vector<Param<T>*>& params, SgdState<T>& state, double lr,
              double momentum, double weight_decay);

struct AugmentParams {
  double scale = 1.0;
  int crop_y = 0;  // offset into the scaled image; negative means padding
  int crop_x = 0;
  bool flip = false;
};

AugmentParams draw_augment(int h, int w, const TrainConfig& cfg, std::mt19937_64& rng);

// Scales rgb and depth bilinearly (depth values divided by the scale) and
// labels by nearest neighbour, crops/pads to crop_h x crop_w (padding:
// rgb 0, depth hole, label ignore) and flips horizontally.
Sample apply_augment(const Sample& s, const AugmentParams& a, int crop_h, int crop_w,
                     int ignore_label = kIgnoreLabel);

Sample augment(const Sample& s, const TrainConfig& cfg, std::mt19937_64& rng);

struct ClassWeights {
  std::vector<double> weights;
  bool has_absent = false;
};

// Median-frequency balancing; absent classes get weight 0.
ClassWeights compute_class_weights(const std::vector<std::int64_t>& counts);

std::vector<std::int64_t> label_histogram(const std::vector<Sample>& samples, int num_classes,
                                          int ignore_label = kIgnoreLabel);

template <typename T>
struct ModelInput {
  Tensor<T> image;    // [3,h,w], rgb mapped to [-1,1]
  Tensor<T> spatial;  // [c',h,w]
  LabelMap label;
};

template <typename T>
ModelInput<T> prepare_input(const Sample& s, const CameraIntrinsics& k, const NetworkConfig& cfg);

std::vector<Sample> load_split(const DatasetManifest& m, int limit = 0);

template <typename T>
struct EvalResult {
  ConfusionMatrix cm;
  SegMetrics metrics;
};

template <typename T>
EvalResult<T> evaluate(SegModel<T>& model, const std::vector<ModelInput<T>>& inputs,
                       int num_classes, int ignore_label = kIgnoreLabel);

struct EpochRecord {
  int epoch = 0;
  long iteration = 0;
  double train_loss = 0;
  SegMetrics val;
};

struct FitResult {
  std::vector<EpochRecord> history;
  double first_batch_loss = 0;
  double best_miou = -1;
  int best_epoch = -1;
  long iterations = 0;
};

struct FitOptions {
  // When set: train_log.jsonl, metrics.json, metrics_epoch<N>.json,
  // checkpoints/last and checkpoints/best.
  std::filesystem::path out_dir;
  bool resume = false;
  int stop_after_epochs = 0;  // end the run early, keeping the schedule
  bool evaluate_each_epoch = true;
  std::function<void(const std::string&)> log;
};

template <typename T>
FitResult fit(SegModel<T>& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
              const CameraIntrinsics& k, int num_classes, const TrainConfig& cfg,
              const FitOptions& opt = {});

}  // namespace sconv

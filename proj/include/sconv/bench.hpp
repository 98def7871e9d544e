#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "sconv/sgnet.hpp"

namespace sconv {

struct BenchOptions {
  int warmup = 5;
  int runs = 30;
  int height = 64;
  int width = 64;
  int batch = 1;  // images per timed call
  std::string precision = "f32";
};

struct ModelTiming {
  std::string name;
  ParamBreakdown params;
  double mean_ms = 0;
  double stddev_ms = 0;
  double min_ms = 0;
  double images_per_sec = 0;
  std::vector<double> runs_ms;
};

struct BenchReport {
  std::string machine;
  std::string protocol;
  int height = 0, width = 0, batch = 1, warmup = 0, runs = 0;
  std::string precision;
  ModelTiming baseline;
  ModelTiming sgnet;
  double latency_ratio = 0;          // sgnet mean / baseline mean
  double param_overhead_percent = 0; // sgnet sconv_extra / baseline total
};

// Times eval-mode forward passes of the baseline twin and SGNet built from
// the same config, alternating the two models run by run. Inputs are
// synthesized in memory, so timings exclude I/O and data loading.
BenchReport run_bench(const NetworkConfig& cfg, const BenchOptions& opt);

nlohmann::json bench_to_json(const BenchReport& r);
std::string bench_table(const BenchReport& r);
std::string machine_descriptor();

}  // namespace sconv

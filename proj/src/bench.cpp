#include "sconv/bench.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <thread>

#include <fmt/format.h>

namespace sconv {

using nlohmann::json;

std::string machine_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream is("/proc/cpuinfo");
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(colon + 2);
      break;
    }
  }
  return fmt::format("{}; {} hw threads; gcc {}.{}; single worker", cpu,
                     std::thread::hardware_concurrency(), __GNUC__, __GNUC_MINOR__);
}

namespace {

void summarize(ModelTiming& t, int batch) {
  const double n = static_cast<double>(t.runs_ms.size());
  t.mean_ms = std::accumulate(t.runs_ms.begin(), t.runs_ms.end(), 0.0) / n;
  double var = 0;
  for (double v : t.runs_ms) var += (v - t.mean_ms) * (v - t.mean_ms);
  t.stddev_ms = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
  t.min_ms = *std::min_element(t.runs_ms.begin(), t.runs_ms.end());
  t.images_per_sec = 1000.0 * batch / t.mean_ms;
}

template <typename T>
BenchReport bench_impl(const NetworkConfig& cfg, const BenchOptions& opt) {
  SegModel<T> sgnet(cfg);
  SegModel<T> base(cfg.baseline());
  std::mt19937_64 rng(cfg.seed ^ 0xbe7c4ULL);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const std::size_t h = opt.height, w = opt.width;
  std::vector<Tensor<T>> images, spatial;
  for (int b = 0; b < opt.batch; ++b) {
    Tensor<T> img({3, h, w}), sp({static_cast<std::size_t>(cfg.spatial_channels()), h, w});
    for (auto& v : img.values()) v = static_cast<T>(u(rng));
    for (auto& v : sp.values()) v = static_cast<T>(u(rng));
    images.push_back(std::move(img));
    spatial.push_back(std::move(sp));
  }
  auto call = [&](SegModel<T>& m) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int b = 0; b < opt.batch; ++b) m.forward(images[b], spatial[b], Mode::eval);
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };
  for (int i = 0; i < opt.warmup; ++i) {
    call(base);
    call(sgnet);
  }
  BenchReport r;
  r.baseline.name = "baseline";
  r.sgnet.name = "sgnet";
  for (int i = 0; i < opt.runs; ++i) {
    r.baseline.runs_ms.push_back(call(base));
    r.sgnet.runs_ms.push_back(call(sgnet));
  }
  summarize(r.baseline, opt.batch);
  summarize(r.sgnet, opt.batch);
  r.baseline.params = base.count_params();
  r.sgnet.params = sgnet.count_params();
  r.latency_ratio = r.sgnet.mean_ms / r.baseline.mean_ms;
  r.param_overhead_percent = 100.0 * static_cast<double>(r.sgnet.params.sconv_extra) /
                             static_cast<double>(r.baseline.params.total);
  return r;
}

}  // namespace

BenchReport run_bench(const NetworkConfig& cfg, const BenchOptions& opt) {
  if (opt.runs < 30 || opt.warmup < 5) fail(ErrorKind::config, "bench needs >= 30 runs and >= 5 warmup runs");
  if (opt.height < 1 || opt.width < 1 || opt.batch < 1) fail(ErrorKind::config, "bad bench extents");
  BenchReport r;
  if (opt.precision == "f32") {
    r = bench_impl<float>(cfg, opt);
  } else if (opt.precision == "f64") {
    r = bench_impl<double>(cfg, opt);
  } else {
    fail(ErrorKind::config, "precision must be f32 or f64");
  }
  r.machine = machine_descriptor();
  r.protocol = fmt::format(
      "eval-mode forward only, {} image(s) per call, {} warmup + {} timed calls per model, "
      "models alternated call by call, steady_clock wall time; inputs generated in memory "
      "(no I/O). Not comparable to published absolute FPS.",
      opt.batch, opt.warmup, opt.runs);
  r.height = opt.height;
  r.width = opt.width;
  r.batch = opt.batch;
  r.warmup = opt.warmup;
  r.runs = opt.runs;
  r.precision = opt.precision;
  return r;
}

namespace {

json timing_json(const ModelTiming& t) {
  return json{{"params",
               {{"backbone", t.params.backbone},
                {"sconv_extra", t.params.sconv_extra},
                {"decoder", t.params.decoder},
                {"total", t.params.total}}},
              {"latency_ms", {{"mean", t.mean_ms}, {"stddev", t.stddev_ms}, {"min", t.min_ms}}},
              {"images_per_sec", t.images_per_sec},
              {"runs_ms", t.runs_ms}};
}

}  // namespace

json bench_to_json(const BenchReport& r) {
  return json{{"machine", r.machine},
              {"protocol", r.protocol},
              {"input", {{"height", r.height}, {"width", r.width}, {"batch", r.batch}}},
              {"precision", r.precision},
              {"warmup", r.warmup},
              {"runs", r.runs},
              {"models", {{"baseline", timing_json(r.baseline)}, {"sgnet", timing_json(r.sgnet)}}},
              {"latency_ratio", r.latency_ratio},
              {"param_overhead_percent", r.param_overhead_percent}};
}

std::string bench_table(const BenchReport& r) {
  std::string s = fmt::format("input {}x{}  batch {}  {}  ({} warmup, {} runs)\n", r.height, r.width,
                              r.batch, r.precision, r.warmup, r.runs);
  s += fmt::format("{:<10} {:>12} {:>12} {:>12} {:>10} {:>10} {:>9}\n", "model", "params", "extra",
                   "mean ms", "std ms", "img/s", "ratio");
  for (const auto* t : {&r.baseline, &r.sgnet}) {
    s += fmt::format("{:<10} {:>12} {:>12} {:>12.3f} {:>10.3f} {:>10.1f} {:>9.2f}\n", t->name,
                     t->params.total, t->params.sconv_extra, t->mean_ms, t->stddev_ms,
                     t->images_per_sec, t->mean_ms / r.baseline.mean_ms);
  }
  s += fmt::format("sconv_extra / baseline total = {:.2f}%\n", r.param_overhead_percent);
  s += "machine: " + r.machine + "\n";
  return s;
}

}  // namespace sconv

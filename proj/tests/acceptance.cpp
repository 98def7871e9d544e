// Acceptance run: one PASS/FAIL line per criterion, plus a JSON report.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "sconv/bench.hpp"
#include "sconv/checkpoint.hpp"
#include "sconv/config.hpp"
#include "sconv/gradcheck.hpp"
#include "sconv/metrics.hpp"
#include "sconv/sconv_op.hpp"
#include "sconv/sgnet.hpp"
#include "sconv/training.hpp"

using namespace sconv;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  json data = json::object();
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void log(const std::string& s) { std::cerr << "  " << s << std::endl; }

Tensor<double> uniform(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// ---------------------------------------------------------------------------

struct DrawnConv {
  SConvState<double> state;
  Tensor<double> input;
  ProjectedSpatial<double> spatial;
  ConvGeometry geom;
};

DrawnConv draw_conv(std::mt19937_64& rng, bool scramble_guidance, bool allow_bias = true) {
  std::uniform_int_distribution<int> ch(1, 5), size(5, 11), two(1, 2), coin(0, 1);
  const int k = coin(rng) ? 3 : 1;
  const auto g = ConvGeometry::square(k, two(rng), -1, k == 3 ? two(rng) : 1);
  const int cin = ch(rng), cout = ch(rng);
  DrawnConv d{SConvState<double>({cin, cout, g, allow_bias && coin(rng) == 1, 8}, rng),
              uniform({static_cast<std::size_t>(cin), static_cast<std::size_t>(size(rng)),
                       static_cast<std::size_t>(size(rng))},
                      rng),
              {}, g};
  d.spatial = {uniform({64, d.input.dim(1), d.input.dim(2)}, rng), SpatialSource::depth};
  if (scramble_guidance) {
    for (auto* p : d.state.guidance_params())
      for (auto& v : p->value.values()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  }
  std::normal_distribution<double> he(0.0, 0.5);
  for (auto& v : d.state.weight().value.values()) v = he(rng);
  for (auto& v : d.state.bias().value.values()) v = he(rng);
  return d;
}

Outcome criterion1() {
  std::mt19937_64 rng(101);
  double worst = 0;
  const int draws = 60;
  for (int i = 0; i < draws; ++i) {
    auto d = draw_conv(rng, true);
    d.state.freeze_offsets_zero = true;
    d.state.freeze_mask_one = true;
    const auto y = sconv_forward(d.input, d.state, d.spatial);
    const Tensor<double>* b = d.state.options().bias ? &d.state.bias().value : nullptr;
    const auto ref = conv2d_forward(d.input, d.state.weight().value, b, d.geom);
    worst = std::max(worst, max_abs_diff(y, ref));
  }
  return {worst <= 1e-12, fmt::format("max |sconv - conv2d| = {:.3g} over {} random draws (f64)", worst, draws),
          {{"max_abs_diff", worst}, {"draws", draws}}};
}

Outcome criterion2() {
  std::mt19937_64 rng(202);
  double worst = 0;
  const int draws = 50;
  for (int i = 0; i < draws; ++i) {
    // The bias is added after masking, so only bias-free hosts halve exactly.
    auto d = draw_conv(rng, false, false);
    const auto y = sconv_forward(d.input, d.state, d.spatial);
    const Tensor<double>* b = d.state.options().bias ? &d.state.bias().value : nullptr;
    auto ref = conv2d_forward(d.input, d.state.weight().value, b, d.geom);
    for (auto& v : ref.values()) v *= 0.5;
    worst = std::max(worst, max_abs_diff(y, ref));
  }
  return {worst <= 1e-12, fmt::format("max |sconv - 0.5 conv2d| = {:.3g} over {} fresh layers", worst, draws),
          {{"max_abs_diff", worst}, {"draws", draws}}};
}

Outcome criterion3() {
  const auto t0 = Clock::now();
  const int trials = 20;
  GradCheckOptions opt;
  opt.tolerance = 1e-5;
  bool ok = true;
  std::map<std::string, double> worst;
  std::vector<std::string> failures;
  for (const auto& op : gradcheck_ops()) {
    for (int t = 0; t < trials; ++t) {
      auto c = make_gradcheck_case(op, mix_seed(303, t));
      for (const auto& r : run_gradcheck(c, opt, mix_seed(303, t, 1))) {
        const auto key = op + "/" + r.group;
        worst[key] = std::max(worst[key], r.max_rel_error);
        if (!r.passed) {
          ok = false;
          failures.push_back(fmt::format("{} trial {}", key, t));
        }
      }
    }
  }
  double overall = 0;
  for (const auto& [k, v] : worst) overall = std::max(overall, v);
  const double secs = seconds_since(t0);
  ok = ok && secs < 300;
  json data{{"worst_rel_error", worst}, {"failures", failures}, {"seconds", secs}};
  return {ok,
          fmt::format("{} ops, {} groups, {} trials each; worst rel err {:.2e}; {} failures; {:.0f}s",
                      gradcheck_ops().size(), worst.size(), trials, overall, failures.size(), secs),
          data};
}

// ---------------------------------------------------------------------------

struct Experiment {
  NetworkConfig net;
  TrainConfig train;
  SynthConfig synth;
  std::vector<Sample> train_set, val_set;
  CameraIntrinsics camera;
  std::unique_ptr<SegModel<float>> trained_sgnet;  // first seed, kept for criterion 10
};

Outcome criterion4(Experiment& ex, const fs::path& work) {
  const auto t0 = Clock::now();
  fs::remove_all(work / "synth");
  const auto ds = synth_generate(ex.synth, work / "synth");
  ex.train_set = load_split(ds.train);
  ex.val_set = load_split(ds.val);
  ex.camera = ds.train.camera();

  std::vector<double> gaps, sg, bl;
  json runs = json::array();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    double miou[2] = {0, 0};
    for (int variant = 0; variant < 2; ++variant) {
      NetworkConfig net = ex.net;
      net.seed = seed;
      if (variant == 1) net = net.baseline();
      TrainConfig tc = ex.train;
      tc.seed = seed;
      auto model = std::make_unique<SegModel<float>>(net);
      FitOptions fo;
      fo.evaluate_each_epoch = false;
      const auto rt = Clock::now();
      const auto r = fit(*model, ex.train_set, ex.val_set, ex.camera, net.num_classes, tc, fo);
      miou[variant] = r.history.back().val.miou;
      log(fmt::format("seed {} {:<8} val mIoU {:.4f} ({:.0f}s)", seed, variant ? "baseline" : "sgnet",
                      miou[variant], seconds_since(rt)));
      runs.push_back({{"seed", seed},
                      {"model", variant ? "baseline" : "sgnet"},
                      {"val", metrics_to_json(r.history.back().val)},
                      {"seconds", seconds_since(rt)}});
      if (variant == 0 && !ex.trained_sgnet) ex.trained_sgnet = std::move(model);
    }
    sg.push_back(miou[0]);
    bl.push_back(miou[1]);
    gaps.push_back(100.0 * (miou[0] - miou[1]));
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  const double gap = median(gaps), secs = seconds_since(t0);
  const bool ok = gap >= 5.0 && secs < 1800;
  return {ok,
          fmt::format("median gap {:+.2f} mIoU points (sgnet {:.2f} vs baseline {:.2f}, per-seed gaps {:+.1f} {:+.1f} "
                      "{:+.1f}); {}/{} scenes; {:.0f}s",
                      gap, 100 * median(sg), 100 * median(bl), gaps[0], gaps[1], gaps[2], ex.train_set.size(),
                      ex.val_set.size(), secs),
          {{"median_gap_points", gap}, {"runs", runs}, {"seconds", secs}}};
}

Outcome criterion5(Experiment& ex, const fs::path& work) {
  const auto t0 = Clock::now();
  if (ex.train_set.empty()) {
    const auto ds = synth_generate(ex.synth, work / "synth");
    ex.train_set = load_split(ds.train);
    ex.camera = ds.train.camera();
  }
  const std::vector<Sample> eight(ex.train_set.begin(), ex.train_set.begin() + 8);
  NetworkConfig net = ex.net;
  net.seed = 5;
  TrainConfig tc = ex.train;
  tc.seed = 5;
  tc.augment = false;
  tc.batch_size = 1;
  tc.max_iters = 2000;
  tc.epochs = 250;
  SegModel<float> model(net);
  FitOptions fo;
  // The eight training samples double as the evaluation set, so every epoch
  // reports train pixel accuracy.
  const auto r = fit(model, eight, eight, ex.camera, net.num_classes, tc, fo);
  double best = 0;
  long best_iter = 0;
  for (const auto& e : r.history) {
    if (e.val.acc > best) {
      best = e.val.acc;
      best_iter = e.iteration;
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = best >= 0.99 && secs < 600;
  return {ok,
          fmt::format("best train pixel accuracy {:.4f} (iteration {}), final {:.4f}, {} iterations; {:.0f}s", best,
                      best_iter, r.history.back().val.acc, r.iterations, secs),
          {{"best_acc", best}, {"best_iteration", best_iter}, {"final_acc", r.history.back().val.acc}, {"seconds", secs}}};
}

Outcome criterion6(const Experiment& ex) {
  SegModel<float> sg(ex.net), bl(ex.net.baseline());
  const auto s = sg.count_params(), b = bl.count_params();
  const auto es = expected_param_count(ex.net), eb = expected_param_count(ex.net.baseline());
  const bool formulas = s.total == es.total && s.sconv_extra == es.sconv_extra && s.backbone == es.backbone &&
                        s.decoder == es.decoder && b.total == eb.total;
  const double pct = 100.0 * static_cast<double>(s.sconv_extra) / static_cast<double>(b.total);
  return {formulas && pct <= 5.0,
          fmt::format("sconv_extra {} / baseline total {} = {:.2f}% (limit 5%); closed form {} registry", s.sconv_extra,
                      b.total, pct, formulas ? "matches" : "DIFFERS FROM"),
          {{"sconv_extra", s.sconv_extra},
           {"baseline_total", b.total},
           {"sgnet_total", s.total},
           {"percent", pct},
           {"closed_form_matches", formulas}}};
}

Outcome criterion7(const fs::path& work, const fs::path& config) {
  const fs::path out = work / "bench";
  fs::remove_all(out);
  const std::string cmd = fmt::format("{} bench --config {} --out {} > {} 2>&1", SCONV_CLI, config.string(),
                                      out.string(), (work / "bench.log").string());
  const int rc = std::system(cmd.c_str());
  if (rc != 0 || !fs::exists(out / "bench.json")) {
    return {false, "sconv bench failed: " + slurp(work / "bench.log")};
  }
  std::ifstream is(out / "bench.json");
  const json j = json::parse(is);
  const double ratio = j["latency_ratio"].get<double>();
  const double sg = j["models"]["sgnet"]["latency_ms"]["mean"].get<double>();
  const double bl = j["models"]["baseline"]["latency_ms"]["mean"].get<double>();
  return {ratio <= 2.0,
          fmt::format("sgnet {:.2f} ms / baseline {:.2f} ms = {:.2f}x (limit 2.0x), {} runs after {} warmup at 64x64",
                      sg, bl, ratio, j["runs"].get<int>(), j["warmup"].get<int>()),
          j};
}

Outcome criterion8() {
  std::mt19937_64 rng(808);
  int mismatches = 0;
  const int pairs = 150;
  for (int t = 0; t < pairs; ++t) {
    const int n = 2 + static_cast<int>(rng() % 7);
    const std::size_t h = 3 + rng() % 10, w = 3 + rng() % 10;
    LabelMap pred({h, w}), gt({h, w});
    const int present = 1 + static_cast<int>(rng() % n);
    for (std::size_t i = 0; i < gt.numel(); ++i) {
      gt[i] = rng() % 10 == 0 ? kIgnoreLabel : static_cast<int>(rng() % present);
      pred[i] = static_cast<int>(rng() % n);
    }
    ConfusionMatrix cm(n);
    cm.accumulate(pred, gt, kIgnoreLabel);
    const auto m = compute_metrics(cm);

    std::vector<std::uint64_t> tp(n), g(n), p(n);
    std::uint64_t correct = 0, total = 0;
    for (std::size_t i = 0; i < gt.numel(); ++i) {
      if (gt[i] == kIgnoreLabel) continue;
      ++total;
      ++g[gt[i]];
      ++p[pred[i]];
      if (gt[i] == pred[i]) {
        ++tp[gt[i]];
        ++correct;
      }
    }
    if (total == 0) continue;
    double acc_sum = 0, iou_sum = 0;
    int na = 0, ni = 0;
    bool same = static_cast<double>(correct) / static_cast<double>(total) == m.acc;
    for (int c = 0; c < n; ++c) {
      if (g[c] > 0) {
        acc_sum += static_cast<double>(tp[c]) / static_cast<double>(g[c]);
        ++na;
      }
      if (g[c] > 0 || p[c] > 0) {
        const double iou = static_cast<double>(tp[c]) / static_cast<double>(g[c] + p[c] - tp[c]);
        iou_sum += iou;
        ++ni;
        same = same && iou == m.per_class_iou[c];
      } else {
        same = same && std::isnan(m.per_class_iou[c]);
      }
    }
    same = same && acc_sum / na == m.macc && iou_sum / ni == m.miou;
    if (!same) ++mismatches;
  }
  LabelMap gt({16, 16});
  for (std::size_t i = 0; i < gt.numel(); ++i) gt[i] = static_cast<int>(rng() % 5);
  ConfusionMatrix cm(5);
  cm.accumulate(gt, gt, kIgnoreLabel);
  const auto m = compute_metrics(cm);
  const bool perfect = m.acc == 1.0 && m.macc == 1.0 && m.miou == 1.0;
  return {mismatches == 0 && perfect,
          fmt::format("{} mismatches against per-pixel counting over {} random pairs; perfect prediction acc/macc/miou "
                      "= {}/{}/{}",
                      mismatches, pairs, m.acc, m.macc, m.miou),
          {{"mismatches", mismatches}, {"pairs", pairs}}};
}

Outcome criterion9() {
  const double base = 5e-3;
  const bool ends = poly_lr(0, 1000, base, 0.9) == base && poly_lr(1000, 1000, base, 0.9) == 0.0;

  std::mt19937_64 rng(909);
  Param<double> w("w", {17});
  for (auto& v : w.value.values()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  const auto w0 = w.value;
  std::vector<Param<double>*> ps{&w};
  SgdState<double> st;
  const double lr = 0.05, mu = 0.9, wd = 5e-4;
  const auto g1 = uniform({17}, rng), g2 = uniform({17}, rng);
  w.grad = g1;
  sgd_step(ps, st, lr, mu, wd);
  w.grad = g2;
  sgd_step(ps, st, lr, mu, wd);
  double worst = 0;
  for (std::size_t i = 0; i < 17; ++i) {
    const double v1 = g1[i] + wd * w0[i];
    const double p1 = w0[i] - lr * v1;
    const double v2 = mu * v1 + g2[i] + wd * p1;
    const double p2 = p1 - lr * v2;
    worst = std::max(worst, std::abs(p2 - w.value[i]));
  }
  return {ends && worst <= 1e-12,
          fmt::format("poly_lr(0) = base and poly_lr(max) = 0: {}; two-step momentum SGD max diff {:.3g}",
                      ends ? "exact" : "NOT exact", worst),
          {{"endpoints_exact", ends}, {"sgd_max_diff", worst}}};
}

template <typename T>
std::pair<double, double> map_range(const std::vector<ReceptiveFieldMap<T>>& maps) {
  double lo = 1e300, hi = -1e300;
  for (const auto& m : maps)
    for (auto v : m.map.values()) {
      lo = std::min(lo, static_cast<double>(v));
      hi = std::max(hi, static_cast<double>(v));
    }
  return {lo, hi};
}

Outcome criterion10(Experiment& ex) {
  if (!ex.trained_sgnet) return {false, "no trained model (criterion 4 did not run)"};
  const Sample& s = ex.val_set.front();
  auto in = prepare_input<float>(s, ex.camera, ex.net);

  SegModel<float> fresh(ex.net);
  const auto fresh_maps = receptive_field_map(fresh, in.image, in.spatial);
  const auto [flo, fhi] = map_range(fresh_maps);
  const bool zeros = !fresh_maps.empty() && flo == 0.0 && fhi == 0.0;

  // Push a square patch of the scene 0.5 m towards the camera.
  DepthMap bumped = s.depth;
  const int h = bumped.height(), w = bumped.width();
  for (int y = h / 4; y < h / 2; ++y)
    for (int x = w / 4; x < w / 2; ++x) {
      auto& z = bumped.values(0, y, x);
      if (bumped.valid[static_cast<std::size_t>(y) * w + x]) z = std::max(0.1, z - 0.5);
    }
  Sample moved = s;
  moved.depth = bumped;
  const auto in2 = prepare_input<float>(moved, ex.camera, ex.net);
  const auto a = receptive_field_map(*ex.trained_sgnet, in.image, in.spatial);
  const auto b = receptive_field_map(*ex.trained_sgnet, in2.image, in2.spatial);
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, static_cast<double>(max_abs_diff(a[i].map, b[i].map)));
  const auto [lo1, hi1] = map_range(a);
  const auto [lo2, hi2] = map_range(b);
  const double lo = std::min(lo1, lo2), hi = std::max(hi1, hi2);
  const bool ok = zeros && diff > 0 && lo >= 0 && hi <= 255;
  return {ok,
          fmt::format("fresh model: {} maps all zero = {}; trained model: depth perturbation changes maps by up to "
                      "{:.2f}, values in [{:.1f}, {:.1f}]",
                      fresh_maps.size(), zeros ? "yes" : "no", diff, lo, hi),
          {{"fresh_all_zero", zeros}, {"max_map_change", diff}, {"min", lo}, {"max", hi}}};
}

struct RunArtifacts {
  std::map<std::string, std::string> init_files;
  double first_batch_loss = 0;
  std::string eval_json;
  std::string dataset_digest;
};

RunArtifacts full_run(const Experiment& ex, const fs::path& dir) {
  fs::remove_all(dir);
  SynthConfig sc = ex.synth;
  sc.train_scenes = 16;
  sc.val_scenes = 8;
  const auto ds = synth_generate(sc, dir / "data");
  const auto train = load_split(ds.train), val = load_split(ds.val);
  NetworkConfig net = ex.net;
  net.seed = 11;
  TrainConfig tc = ex.train;
  tc.seed = 11;
  tc.epochs = 2;
  SegModel<float> model(net);
  save_checkpoint(model, dir / "init");
  FitOptions fo;
  fo.out_dir = dir / "run";
  const auto r = fit(model, train, val, ds.train.camera(), net.num_classes, tc, fo);
  std::vector<ModelInput<float>> inputs;
  for (const auto& s : val) inputs.push_back(prepare_input<float>(s, ds.val.camera(), net));
  const auto ev = evaluate(model, inputs, net.num_classes);

  RunArtifacts a;
  for (const auto& e : fs::directory_iterator(dir / "init")) a.init_files[e.path().filename().string()] = slurp(e.path());
  a.first_batch_loss = r.first_batch_loss;
  a.eval_json = metrics_to_json(ev.metrics).dump();
  for (const auto& e : fs::recursive_directory_iterator(dir / "data"))
    if (e.is_regular_file()) a.dataset_digest += std::to_string(std::hash<std::string>{}(slurp(e.path())));
  return a;
}

Outcome criterion11(const Experiment& ex, const fs::path& work) {
  const auto a = full_run(ex, work / "det_a");
  const auto b = full_run(ex, work / "det_b");
  const bool ckpt = !a.init_files.empty() && a.init_files == b.init_files;
  const bool loss = a.first_batch_loss == b.first_batch_loss;
  const bool eval = a.eval_json == b.eval_json;
  const bool data = a.dataset_digest == b.dataset_digest;
  return {ckpt && loss && eval && data,
          fmt::format("initial checkpoint ({} files) identical: {}; first-batch loss {:.9g} vs {:.9g}; eval metrics "
                      "identical: {}; dataset identical: {}",
                      a.init_files.size(), ckpt ? "yes" : "no", a.first_batch_loss, b.first_batch_loss,
                      eval ? "yes" : "no", data ? "yes" : "no"),
          {{"checkpoint_identical", ckpt}, {"first_batch_loss", a.first_batch_loss}, {"eval", json::parse(a.eval_json)}}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string work = "acceptance_work";
  std::string config = SCONV_SOURCE_DIR "/configs/synth_ab.toml";
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory for datasets and reports");
  app.add_option("--config", config, "Experiment configuration");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const fs::path wd = fs::absolute(work);
  fs::create_directories(wd);
  Experiment ex;
  const auto kv = KeyValueConfig::load(config);
  apply_config(kv, ex.net);
  apply_config(kv, ex.train);
  apply_config(kv, ex.synth);

  const std::vector<std::pair<int, std::string>> names = {
      {1, "degenerate equivalence"}, {2, "fresh-init halving"},    {3, "gradient suite"},
      {4, "geometry gain"},          {5, "overfit sanity"},        {6, "parameter overhead"},
      {7, "latency overhead"},       {8, "metrics oracle"},        {9, "schedule/optimizer exactness"},
      {10, "receptive-field export"}, {11, "determinism"}};
  const std::map<int, std::function<Outcome()>> run = {
      {1, criterion1},
      {2, criterion2},
      {3, criterion3},
      {4, [&] { return criterion4(ex, wd); }},
      {5, [&] { return criterion5(ex, wd); }},
      {6, [&] { return criterion6(ex); }},
      {7, [&] { return criterion7(wd, config); }},
      {8, criterion8},
      {9, criterion9},
      {10, [&] { return criterion10(ex); }},
      {11, [&] { return criterion11(ex, wd); }},
  };

  json report = json::array();
  int failed = 0;
  for (const auto& [id, name] : names) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = run.at(id)();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (!o.pass) ++failed;
    std::cout << fmt::format("[{}] {:>2}. {}: {} ({:.1f}s)", o.pass ? "PASS" : "FAIL", id, name, o.detail, secs)
              << std::endl;
    report.push_back({{"criterion", id}, {"name", name}, {"pass", o.pass}, {"detail", o.detail},
                      {"seconds", secs}, {"data", o.data}});
  }
  std::ofstream(wd / "acceptance_report.json") << report.dump(2) << '\n';
  std::cout << fmt::format("{} of {} criteria passed; report in {}", report.size() - failed, report.size(),
                           (wd / "acceptance_report.json").string())
            << std::endl;
  return failed == 0 ? 0 : 1;
}

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <fmt/format.h>

#include "sconv/bench.hpp"
#include "sconv/checkpoint.hpp"
#include "sconv/config.hpp"
#include "sconv/data_io.hpp"
#include "sconv/gradcheck.hpp"
#include "sconv/metrics.hpp"
#include "sconv/png_io.hpp"
#include "sconv/sgnet.hpp"
#include "sconv/training.hpp"

namespace fs = std::filesystem;
using namespace sconv;

namespace {

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string precision = "f32";
  std::string out;
};

KeyValueConfig load_config(const Globals& g) {
  KeyValueConfig kv = g.config_path.empty() ? KeyValueConfig{} : KeyValueConfig::load(g.config_path);
  for (const auto& o : g.overrides) kv.apply_override(o);
  return kv;
}

fs::path out_dir(const Globals& g, const char* fallback) { return g.out.empty() ? fs::path(fallback) : fs::path(g.out); }

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::io, "cannot write " + path.string());
  os << j.dump(2) << '\n';
}

// --- synth ---------------------------------------------------------------

struct SynthArgs {
  bool force = false;
  std::optional<int> train_scenes, val_scenes;
};

int cmd_synth(const Globals& g, const SynthArgs& a) {
  SynthConfig cfg;
  apply_config(load_config(g), cfg);
  if (g.seed) cfg.seed = *g.seed;
  if (a.train_scenes) cfg.train_scenes = *a.train_scenes;
  if (a.val_scenes) cfg.val_scenes = *a.val_scenes;
  const fs::path out = out_dir(g, "data/synth");
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!a.force) fail(ErrorKind::io, fmt::format("{} is not empty; pass --force to overwrite", out.string()));
    fs::remove_all(out);
  }
  const auto ds = synth_generate(cfg, out);
  fmt::print("wrote {} train / {} val scenes to {}\n", ds.train.size(), ds.val.size(), out.string());
  return 0;
}

// --- train ---------------------------------------------------------------

struct TrainArgs {
  std::string data = "data/synth";
  bool resume = false;
  int stop_after_epochs = 0;
  std::optional<double> lr;
  std::optional<int> epochs;
  bool baseline = false;
};

template <typename T>
int train_impl(const Globals& g, const TrainArgs& a) {
  const auto kv = load_config(g);
  NetworkConfig net;
  TrainConfig tc;
  apply_config(kv, net);
  apply_config(kv, tc);
  if (g.seed) {
    net.seed = *g.seed;
    tc.seed = *g.seed;
  }
  if (a.lr) tc.base_lr = *a.lr;
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.baseline) net = net.baseline();
  tc.validate();
  const auto train_m = load_manifest(fs::path(a.data) / "train" / "manifest.txt");
  const auto val_m = load_manifest(fs::path(a.data) / "val" / "manifest.txt");
  if (train_m.num_classes != net.num_classes) {
    fail(ErrorKind::config, fmt::format("dataset has {} classes, network {}", train_m.num_classes, net.num_classes));
  }
  const fs::path out = out_dir(g, "runs/train");
  fs::create_directories(out);
  write_json(out / "config.json", {{"network", to_json(net)}, {"train", to_json(tc)}, {"precision", g.precision}});
  SegModel<T> model(net);
  if (!a.resume) save_checkpoint(model, out / "checkpoints" / "init");
  FitOptions fo;
  fo.out_dir = out;
  fo.resume = a.resume;
  fo.stop_after_epochs = a.stop_after_epochs;
  fo.log = [](const std::string& s) { std::cerr << s << '\n'; };
  const auto r = fit(model, load_split(train_m, tc.train_subset), load_split(val_m), train_m.camera(),
                     net.num_classes, tc, fo);
  save_checkpoint(model, out / "checkpoints" / "final");
  fmt::print("iterations {}  first-batch loss {:.6f}  best mIoU {:.4f} (epoch {})\n", r.iterations,
             r.first_batch_loss, r.best_miou, r.best_epoch);
  return 0;
}

// --- eval ----------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string manifest = "data/synth/val/manifest.txt";
  std::string predictions;
};

template <typename T>
int eval_impl(const Globals& g, const EvalArgs& a) {
  const auto m = load_manifest(a.manifest);
  ConfusionMatrix cm(m.num_classes);
  if (!a.predictions.empty()) {
    for (std::size_t i = 0; i < m.size(); ++i) {
      const auto s = load_sample(m, i);
      const auto png = read_png(fs::path(a.predictions) / fs::path(m.entries[i].label).filename());
      if (png.channels != 1 || png.width != static_cast<int>(s.label.dim(1)) ||
          png.height != static_cast<int>(s.label.dim(0))) {
        fail(ErrorKind::data, "prediction PNG does not match label extents: " + m.entries[i].label);
      }
      LabelMap pred(s.label.shape());
      for (std::size_t p = 0; p < pred.numel(); ++p) pred[p] = png.samples[p];
      cm.accumulate(pred, s.label, m.ignore_label);
    }
  } else {
    if (a.checkpoint.empty()) fail(ErrorKind::config, "eval needs --checkpoint or --predictions");
    auto model = load_checkpoint<T>(a.checkpoint);
    std::vector<ModelInput<T>> inputs;
    const auto k = m.camera();
    for (std::size_t i = 0; i < m.size(); ++i) inputs.push_back(prepare_input<T>(load_sample(m, i), k, model->config()));
    cm = evaluate(*model, inputs, m.num_classes, m.ignore_label).cm;
  }
  const auto metrics = compute_metrics(cm);
  const fs::path out = out_dir(g, "runs/eval");
  fs::create_directories(out);
  write_metrics_json(metrics, out / "metrics.json");
  std::cout << metrics_to_json(metrics).dump(2) << '\n';
  return 0;
}

// --- gradcheck -----------------------------------------------------------

struct GradArgs {
  std::string op = "all";
  int trials = 20;
  double tolerance = 1e-5;
  std::string mutate;  // group name whose analytic gradient gets negated
};

int cmd_gradcheck(const Globals& g, const GradArgs& a) {
  std::vector<std::string> ops = a.op == "all" ? gradcheck_ops() : std::vector<std::string>{a.op};
  GradCheckOptions opt;
  opt.tolerance = a.tolerance;
  if (!a.mutate.empty()) opt.flip_sign_group = a.mutate;
  const std::uint64_t base_seed = g.seed.value_or(0);
  bool all_passed = true, mutation_caught = false;
  fmt::print("{:<24} {:<12} {:>7} {:>8} {:>13}  {}\n", "op", "group", "trials", "skipped", "max rel err", "status");
  for (const auto& op : ops) {
    std::map<std::string, GroupResult> agg;
    std::vector<std::string> order;
    for (int t = 0; t < a.trials; ++t) {
      auto c = make_gradcheck_case(op, mix_seed(base_seed, t));
      for (const auto& r : run_gradcheck(c, opt, mix_seed(base_seed, t, 1))) {
        auto [it, fresh] = agg.try_emplace(r.group, r);
        if (fresh) {
          order.push_back(r.group);
          it->second.checked = 0;
          it->second.skipped_kinks = 0;
          it->second.max_rel_error = 0;
          it->second.passed = true;
        }
        auto& s = it->second;
        s.checked += r.checked;
        s.skipped_kinks += r.skipped_kinks;
        s.max_rel_error = std::max(s.max_rel_error, r.max_rel_error);
        s.passed = s.passed && r.passed;
      }
    }
    for (const auto& name : order) {
      const auto& s = agg[name];
      const bool mutated = opt.flip_sign_group && *opt.flip_sign_group == name;
      if (mutated && !s.passed) mutation_caught = true;
      all_passed = all_passed && s.passed;
      fmt::print("{:<24} {:<12} {:>7} {:>8} {:>13.3e}  {}{}\n", op, name, a.trials, s.skipped_kinks,
                 s.max_rel_error, s.passed ? "pass" : "FAIL", mutated ? " (mutated)" : "");
    }
  }
  if (opt.flip_sign_group) {
    fmt::print("mutation of '{}': {}\n", *opt.flip_sign_group, mutation_caught ? "caught" : "NOT caught");
    return mutation_caught ? 0 : 1;
  }
  return all_passed ? 0 : 1;
}

// --- bench ---------------------------------------------------------------

int cmd_bench(const Globals& g, const BenchOptions& in) {
  NetworkConfig net;
  apply_config(load_config(g), net);
  if (g.seed) net.seed = *g.seed;
  BenchOptions opt = in;
  opt.precision = g.precision;
  const auto r = run_bench(net, opt);
  const fs::path out = out_dir(g, "runs/bench");
  fs::create_directories(out);
  write_json(out / "bench.json", bench_to_json(r));
  std::cout << bench_table(r);
  return 0;
}

// --- rfvis ---------------------------------------------------------------

struct RfArgs {
  std::string checkpoint;
  std::string manifest = "data/synth/val/manifest.txt";
  int index = 0;
};

template <typename T>
int rfvis_impl(const Globals& g, const RfArgs& a) {
  std::unique_ptr<SegModel<T>> model;
  if (a.checkpoint.empty()) {
    NetworkConfig net;
    apply_config(load_config(g), net);
    if (g.seed) net.seed = *g.seed;
    model = std::make_unique<SegModel<T>>(net);
  } else {
    model = load_checkpoint<T>(a.checkpoint);
  }
  const auto m = load_manifest(a.manifest);
  const auto in = prepare_input<T>(load_sample(m, a.index), m.camera(), model->config());
  const auto maps = receptive_field_map(*model, in.image, in.spatial);
  const fs::path out = out_dir(g, "runs/rfvis");
  fs::create_directories(out);
  for (const auto& r : maps) {
    std::vector<std::uint8_t> px(r.map.numel());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(std::lround(r.map[i]));
    write_png_gray8(out / rf_file_name(r.stage, r.block, r.conv), static_cast<int>(r.map.dim(2)),
                    static_cast<int>(r.map.dim(1)), px);
  }
  fmt::print("wrote {} receptive-field maps to {}\n", maps.size(), out.string());
  return 0;
}

template <template <typename> class F, typename... A>
int dispatch(const Globals& g, const A&... args) {
  if (g.precision == "f32") return F<float>::run(g, args...);
  if (g.precision == "f64") return F<double>::run(g, args...);
  fail(ErrorKind::config, "precision must be f32 or f64");
}

template <typename T>
struct Train {
  static int run(const Globals& g, const TrainArgs& a) { return train_impl<T>(g, a); }
};
template <typename T>
struct Eval {
  static int run(const Globals& g, const EvalArgs& a) { return eval_impl<T>(g, a); }
};
template <typename T>
struct Rfvis {
  static int run(const Globals& g, const RfArgs& a) { return rfvis_impl<T>(g, a); }
};

int exit_code(ErrorKind k) { return 10 + static_cast<int>(k); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"S-Conv / SGNet toy toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "TOML-style key = value config file");
  app.add_option("--set", g.overrides, "Override a config key: section.key=value");
  app.add_option("--seed", g.seed, "Global seed");
  app.add_option("--precision", g.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--out", g.out, "Output directory");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate the synthetic RGBD dataset");
  synth->add_flag("--force", sa.force, "Overwrite a non-empty output directory");
  synth->add_option("--train-scenes", sa.train_scenes);
  synth->add_option("--val-scenes", sa.val_scenes);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train SGNet or its baseline twin");
  train->add_option("--data", ta.data, "Dataset root with train/ and val/ manifests");
  train->add_flag("--resume", ta.resume, "Continue from <out>/checkpoints/last");
  train->add_option("--stop-after-epochs", ta.stop_after_epochs, "End after this many epochs");
  train->add_option("--lr", ta.lr, "Base learning rate");
  train->add_option("--epochs", ta.epochs);
  train->add_flag("--baseline", ta.baseline, "Train the plain-convolution twin");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint or a directory of predictions");
  eval->add_option("--checkpoint", ea.checkpoint);
  eval->add_option("--manifest", ea.manifest);
  eval->add_option("--predictions", ea.predictions, "Directory of 8-bit prediction PNGs named like the labels");

  GradArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every backward pass");
  grad->add_option("--op", ga.op, "Operator name or 'all'");
  grad->add_option("--trials", ga.trials);
  grad->add_option("--tolerance", ga.tolerance);
  grad->add_option("--mutate", ga.mutate, "Negate this group's analytic gradient (mutation test)");

  BenchOptions bo;
  auto* bench = app.add_subcommand("bench", "Forward latency and parameter report");
  bench->add_option("--height", bo.height);
  bench->add_option("--width", bo.width);
  bench->add_option("--runs", bo.runs);
  bench->add_option("--warmup", bo.warmup);
  bench->add_option("--batch", bo.batch);

  RfArgs ra;
  auto* rfvis = app.add_subcommand("rfvis", "Export receptive-field maps as PNGs");
  rfvis->add_option("--checkpoint", ra.checkpoint, "Checkpoint directory (fresh model when omitted)");
  rfvis->add_option("--manifest", ra.manifest);
  rfvis->add_option("--index", ra.index);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error[config]: " << e.what() << '\n';
    return exit_code(ErrorKind::config);
  }

  try {
    if (const char* env = std::getenv("SCONV_THREADS")) {
      const int n = std::atoi(env);
      if (n < 1) fail(ErrorKind::config, "SCONV_THREADS must be a positive integer");
      Eigen::setNbThreads(n);
    }
    if (*synth) return cmd_synth(g, sa);
    if (*train) return dispatch<Train>(g, ta);
    if (*eval) return dispatch<Eval>(g, ea);
    if (*grad) return cmd_gradcheck(g, ga);
    if (*bench) return cmd_bench(g, bo);
    if (*rfvis) return dispatch<Rfvis>(g, ra);
  } catch (const Error& e) {
    std::cerr << "error[" << error_kind_name(e.kind()) << "]: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

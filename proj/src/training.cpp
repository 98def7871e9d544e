#include "sconv/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "json.hpp"
#include "sconv/checkpoint.hpp"

namespace sconv {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (!(base_lr >= 0)) fail(ErrorKind::config, "base_lr must be >= 0");
  if (!(scale_min > 0 && scale_min <= scale_max)) fail(ErrorKind::config, "scale_range must be ordered and positive");
  if (batch_size < 1) fail(ErrorKind::config, "batch_size must be >= 1");
  if (epochs < 1 && max_iters < 1) fail(ErrorKind::config, "need epochs >= 1 or max_iters >= 1");
  if (crop_h < 1 || crop_w < 1) fail(ErrorKind::config, "crop must be positive");
  if (hflip_prob < 0 || hflip_prob > 1) fail(ErrorKind::config, "hflip_prob must lie in [0,1]");
  if (lr_step_granularity != "iteration" && lr_step_granularity != "epoch") {
    fail(ErrorKind::config, "lr_step_granularity must be iteration or epoch");
  }
  if (!(offset_lr_mult >= 0)) fail(ErrorKind::config, "offset_lr_mult must be >= 0");
  if (lr_step_epochs < 1) fail(ErrorKind::config, "lr_step_epochs must be >= 1");
}

double poly_lr(long iter, long max_iter, double base_lr, double power) {
  if (max_iter <= 0) fail(ErrorKind::config, "poly_lr needs max_iter > 0");
  if (iter >= max_iter) return 0.0;
  if (iter <= 0) return base_lr;
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

double scheduled_lr(const TrainConfig& cfg, long iter, long max_iter, long steps_per_epoch) {
  if (cfg.lr_step_granularity == "epoch") {
    const long block = std::max(1L, cfg.lr_step_epochs * steps_per_epoch);
    iter = (iter / block) * block;
  }
  return poly_lr(iter, max_iter, cfg.base_lr, cfg.poly_power);
}

template <typename T>
void sgd_step(const std::vector<Param<T>*>& params, SgdState<T>& state, double lr,
              double momentum, double weight_decay) {
  if (state.velocity.empty()) {
    for (auto* p : params) state.velocity.emplace_back(p->value.shape());
  }
  if (state.velocity.size() != params.size()) {
    fail(ErrorKind::state, "optimizer state does not mirror the parameter list");
  }
  const T mu = static_cast<T>(momentum), l = static_cast<T>(lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    auto& v = state.velocity[k];
    const T wd = p.decay ? static_cast<T>(weight_decay) : T(0);
    const T lp = p.lr_mult == 1.0 ? l : static_cast<T>(lr * p.lr_mult);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      v[i] = mu * v[i] + p.grad[i] + wd * p.value[i];
      p.value[i] -= lp * v[i];
    }
  }
}

AugmentParams draw_augment(int h, int w, const TrainConfig& cfg, std::mt19937_64& rng) {
  AugmentParams a;
  std::uniform_real_distribution<double> scale(cfg.scale_min, cfg.scale_max);
  a.scale = cfg.scale_min == cfg.scale_max ? cfg.scale_min : scale(rng);
  const int sh = std::max(1, static_cast<int>(std::lround(h * a.scale)));
  const int sw = std::max(1, static_cast<int>(std::lround(w * a.scale)));
  auto offset = [&](int size, int crop) {
    std::uniform_int_distribution<int> d(std::min(0, size - crop), std::max(0, size - crop));
    return d(rng);
  };
  a.crop_y = offset(sh, cfg.crop_h);
  a.crop_x = offset(sw, cfg.crop_w);
  a.flip = std::bernoulli_distribution(cfg.hflip_prob)(rng);
  return a;
}

Sample apply_augment(const Sample& s, const AugmentParams& a, int crop_h, int crop_w,
                     int ignore_label) {
  const int h = static_cast<int>(s.label.dim(0)), w = static_cast<int>(s.label.dim(1));
  const int sh = std::max(1, static_cast<int>(std::lround(h * a.scale)));
  const int sw = std::max(1, static_cast<int>(std::lround(w * a.scale)));
  const DepthMap clean = s.depth.fully_valid() ? s.depth : sanitize_depth(s.depth);
  const Tensor<double> rgb = bilinear_resize(s.rgb, sh, sw);
  Tensor<double> depth = bilinear_resize(clean.values, sh, sw);
  if (a.scale != 1.0) {
    for (auto& v : depth.values()) v /= a.scale;
  }
  const LabelMap label = nearest_resize(s.label, sh, sw);

  const std::size_t ch = crop_h, cw = crop_w, plane = ch * cw, splane = static_cast<std::size_t>(sh) * sw;
  Sample out;
  out.rgb = Tensor<double>({3, ch, cw});
  Tensor<double> z({1, ch, cw});
  out.label = LabelMap({ch, cw}, ignore_label);
  for (int y = 0; y < crop_h; ++y) {
    const int sy = y + a.crop_y;
    if (sy < 0 || sy >= sh) continue;
    for (int x = 0; x < crop_w; ++x) {
      const int sx = x + a.crop_x;
      if (sx < 0 || sx >= sw) continue;
      const int ox = a.flip ? crop_w - 1 - x : x;
      const std::size_t dst = static_cast<std::size_t>(y) * cw + ox;
      const std::size_t src = static_cast<std::size_t>(sy) * sw + sx;
      for (int c = 0; c < 3; ++c) out.rgb[c * plane + dst] = rgb[c * splane + src];
      z[dst] = depth[src];
      out.label[dst] = label[src];
    }
  }
  out.depth = DepthMap::from_values(std::move(z));
  return out;
}

Sample augment(const Sample& s, const TrainConfig& cfg, std::mt19937_64& rng) {
  const auto a = draw_augment(static_cast<int>(s.label.dim(0)), static_cast<int>(s.label.dim(1)), cfg, rng);
  return apply_augment(s, a, cfg.crop_h, cfg.crop_w);
}

ClassWeights compute_class_weights(const std::vector<std::int64_t>& counts) {
  ClassWeights cw;
  cw.weights.assign(counts.size(), 0.0);
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  std::vector<double> freq;
  for (auto c : counts) {
    if (c > 0) freq.push_back(c / total);
  }
  if (freq.empty()) fail(ErrorKind::data, "class histogram is empty");
  std::sort(freq.begin(), freq.end());
  const std::size_t n = freq.size();
  const double median = n % 2 == 1 ? freq[n / 2] : 0.5 * (freq[n / 2 - 1] + freq[n / 2]);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] > 0) {
      cw.weights[c] = median / (counts[c] / total);
    } else {
      cw.has_absent = true;
    }
  }
  return cw;
}

std::vector<std::int64_t> label_histogram(const std::vector<Sample>& samples, int num_classes,
                                          int ignore_label) {
  std::vector<std::int64_t> h(num_classes, 0);
  for (const auto& s : samples) {
    for (auto v : s.label.values()) {
      if (v == ignore_label) continue;
      if (v < 0 || v >= num_classes) fail(ErrorKind::data, fmt::format("label {} out of range", v));
      ++h[v];
    }
  }
  return h;
}

template <typename T>
ModelInput<T> prepare_input(const Sample& s, const CameraIntrinsics& k, const NetworkConfig& cfg) {
  ModelInput<T> in;
  in.image = Tensor<T>(s.rgb.shape());
  for (std::size_t i = 0; i < s.rgb.numel(); ++i) in.image[i] = static_cast<T>(2.0 * s.rgb[i] - 1.0);
  in.spatial = build_spatial_input(s.depth, k, cfg.source, cfg.normalize_spatial).template cast<T>();
  in.label = s.label;
  return in;
}

std::vector<Sample> load_split(const DatasetManifest& m, int limit) {
  const std::size_t n = limit > 0 ? std::min<std::size_t>(limit, m.size()) : m.size();
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(load_sample(m, i));
  return out;
}

template <typename T>
EvalResult<T> evaluate(SegModel<T>& model, const std::vector<ModelInput<T>>& inputs,
                       int num_classes, int ignore_label) {
  EvalResult<T> r{ConfusionMatrix(num_classes), {}};
  for (const auto& in : inputs) {
    const auto out = model.forward(in.image, in.spatial, Mode::eval);
    r.cm.accumulate(argmax_classes(out.logits), in.label, ignore_label);
  }
  r.metrics = compute_metrics(r.cm);
  return r;
}

namespace {

template <typename T>
void nan_abort(SegModel<T>& model, const FitOptions& opt, long iter, double lr, double loss) {
  json dump{{"iteration", iter}, {"lr", lr}, {"loss", std::isfinite(loss) ? json(loss) : json(nullptr)}};
  json norms = json::object();
  for (auto* p : model.params()) {
    double s = 0;
    for (auto g : p->grad.values()) s += static_cast<double>(g) * g;
    norms[p->name] = std::isfinite(s) ? json(std::sqrt(s)) : json(nullptr);
  }
  dump["grad_norms"] = norms;
  if (!opt.out_dir.empty()) {
    std::ofstream(opt.out_dir / "nan_dump.json") << dump.dump(2) << '\n';
  }
  fail(ErrorKind::numeric, fmt::format("non-finite loss at iteration {} (lr {}); diagnostics {}", iter,
                                       lr, opt.out_dir.empty() ? dump.dump() : (opt.out_dir / "nan_dump.json").string()));
}

}  // namespace

template <typename T>
FitResult fit(SegModel<T>& model, const std::vector<Sample>& train_all, const std::vector<Sample>& val,
              const CameraIntrinsics& k, int num_classes, const TrainConfig& cfg, const FitOptions& opt) {
  cfg.validate();
  if (train_all.empty()) fail(ErrorKind::data, "training split is empty");
  const std::size_t n = cfg.train_subset > 0 ? std::min<std::size_t>(cfg.train_subset, train_all.size())
                                             : train_all.size();
  const std::vector<Sample> train(train_all.begin(), train_all.begin() + static_cast<long>(n));
  const long steps_per_epoch = static_cast<long>((n + cfg.batch_size - 1) / cfg.batch_size);
  const long max_iter = cfg.max_iters > 0 ? cfg.max_iters : cfg.epochs * steps_per_epoch;
  const int total_epochs = static_cast<int>((max_iter + steps_per_epoch - 1) / steps_per_epoch);
  const auto& net = model.config();

  Tensor<T> weights;
  const Tensor<T>* wptr = nullptr;
  if (cfg.class_reweight) {
    const auto cw = compute_class_weights(label_histogram(train, num_classes));
    if (cw.has_absent && opt.log) opt.log("warning: some classes are absent from the training labels");
    weights = Tensor<T>({static_cast<std::size_t>(num_classes)});
    for (int c = 0; c < num_classes; ++c) weights[c] = static_cast<T>(cw.weights[c]);
    wptr = &weights;
  }

  std::vector<ModelInput<T>> val_inputs;
  for (const auto& s : val) val_inputs.push_back(prepare_input<T>(s, k, net));

  FitResult result;
  SgdState<T> optim;
  int start_epoch = 0;
  std::ofstream log;
  if (!opt.out_dir.empty()) {
    fs::create_directories(opt.out_dir);
    if (opt.resume) {
      json ts;
      load_checkpoint_into(model, opt.out_dir / "checkpoints" / "last", &optim, &ts);
      start_epoch = ts.value("epoch", 0);
      result.best_miou = ts.value("best_miou", -1.0);
      result.best_epoch = ts.value("best_epoch", -1);
    }
    log.open(opt.out_dir / "train_log.jsonl", opt.resume ? std::ios::app : std::ios::trunc);
  }
  result.iterations = optim.iteration;
  auto params = model.params();
  for (auto* p : params) {
    if (p->name.find(".eta.") != std::string::npos) p->lr_mult = cfg.offset_lr_mult;
  }

  int epochs_run = 0;
  for (int epoch = start_epoch; epoch < total_epochs && optim.iteration < max_iter; ++epoch) {
    if (opt.stop_after_epochs > 0 && epochs_run >= opt.stop_after_epochs) break;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 0x5eed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0;
    long epoch_steps = 0;
    for (long step = 0; step < steps_per_epoch && optim.iteration < max_iter; ++step) {
      const std::size_t b0 = step * cfg.batch_size, b1 = std::min<std::size_t>(n, b0 + cfg.batch_size);
      const T inv_b = T(1) / static_cast<T>(b1 - b0);
      model.zero_grad();
      double loss = 0, aux_loss = 0;
      for (std::size_t b = b0; b < b1; ++b) {
        const std::size_t idx = order[b];
        std::mt19937_64 rng(mix_seed(cfg.seed, epoch, idx));
        const auto in = prepare_input<T>(cfg.augment ? augment(train[idx], cfg, rng) : train[idx], k, net);
        const auto out = model.forward(in.image, in.spatial, Mode::train);
        auto ce = softmax_cross_entropy(out.logits, in.label, kIgnoreLabel, wptr);
        for (auto& g : ce.grad_logits.values()) g *= inv_b;
        loss += static_cast<double>(ce.loss);
        if (out.aux && cfg.aux_weight > 0) {
          auto ace = softmax_cross_entropy(*out.aux, in.label, kIgnoreLabel, wptr);
          const T s = static_cast<T>(cfg.aux_weight) * inv_b;
          for (auto& g : ace.grad_logits.values()) g *= s;
          aux_loss += static_cast<double>(ace.loss);
          model.backward(ce.grad_logits, &ace.grad_logits);
        } else {
          model.backward(ce.grad_logits, nullptr);
        }
      }
      loss /= static_cast<double>(b1 - b0);
      aux_loss /= static_cast<double>(b1 - b0);
      const double total = loss + cfg.aux_weight * aux_loss;
      const double lr = scheduled_lr(cfg, optim.iteration, max_iter, steps_per_epoch);
      if (!std::isfinite(total)) nan_abort(model, opt, optim.iteration, lr, total);
      if (optim.iteration == 0) result.first_batch_loss = total;
      sgd_step(params, optim, lr, cfg.momentum, cfg.weight_decay);
      ++optim.iteration;
      epoch_loss += total;
      ++epoch_steps;
      if (log) {
        log << json{{"iter", optim.iteration}, {"lr", lr}, {"loss", total}, {"aux_loss", aux_loss}, {"epoch", epoch}}.dump()
            << '\n';
      }
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.iteration = optim.iteration;
    rec.train_loss = epoch_steps > 0 ? epoch_loss / epoch_steps : 0.0;
    const bool last_epoch = epoch + 1 == total_epochs || optim.iteration >= max_iter;
    if (!val_inputs.empty() && (opt.evaluate_each_epoch || last_epoch)) {
      rec.val = evaluate(model, val_inputs, num_classes).metrics;
      if (rec.val.miou > result.best_miou) {
        result.best_miou = rec.val.miou;
        result.best_epoch = rec.epoch;
        if (!opt.out_dir.empty()) save_checkpoint(model, opt.out_dir / "checkpoints" / "best");
      }
      if (!opt.out_dir.empty()) {
        write_metrics_json(rec.val, opt.out_dir / fmt::format("metrics_epoch{}.json", rec.epoch));
        write_metrics_json(rec.val, opt.out_dir / "metrics.json");
      }
      if (log) {
        log << json{{"iter", optim.iteration}, {"epoch", rec.epoch}, {"train_loss", rec.train_loss},
                    {"mIoU", rec.val.miou}}.dump()
            << '\n';
      }
    }
    if (!opt.out_dir.empty()) {
      save_checkpoint(model, opt.out_dir / "checkpoints" / "last", &optim,
                      json{{"epoch", rec.epoch}, {"best_miou", result.best_miou}, {"best_epoch", result.best_epoch}});
    }
    if (opt.log) {
      opt.log(fmt::format("epoch {} iter {} loss {:.4f} mIoU {:.4f}", rec.epoch, rec.iteration,
                          rec.train_loss, rec.val.miou));
    }
    result.history.push_back(rec);
    ++epochs_run;
  }
  result.iterations = optim.iteration;
  return result;
}

template void sgd_step(const std::vector<Param<float>*>&, SgdState<float>&, double, double, double);
template void sgd_step(const std::vector<Param<double>*>&, SgdState<double>&, double, double, double);
template ModelInput<float> prepare_input(const Sample&, const CameraIntrinsics&, const NetworkConfig&);
template ModelInput<double> prepare_input(const Sample&, const CameraIntrinsics&, const NetworkConfig&);
template EvalResult<float> evaluate(SegModel<float>&, const std::vector<ModelInput<float>>&, int, int);
template EvalResult<double> evaluate(SegModel<double>&, const std::vector<ModelInput<double>>&, int, int);
template FitResult fit(SegModel<float>&, const std::vector<Sample>&, const std::vector<Sample>&,
                       const CameraIntrinsics&, int, const TrainConfig&, const FitOptions&);
template FitResult fit(SegModel<double>&, const std::vector<Sample>&, const std::vector<Sample>&,
                       const CameraIntrinsics&, int, const TrainConfig&, const FitOptions&);

}  // namespace sconv

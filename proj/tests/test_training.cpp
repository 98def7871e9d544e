#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <set>

#include "sconv/checkpoint.hpp"
#include "sconv/training.hpp"

using namespace sconv;
namespace fs = std::filesystem;

namespace {

NetworkConfig tiny_net(std::uint64_t seed = 1) {
  NetworkConfig c;
  c.widths = {4, 8};
  c.sconv_policy = NetworkConfig::default_policy(2, 2);
  c.decoder_channels = 8;
  c.decoder_convs = 1;
  c.f_hidden = 4;
  c.seed = seed;
  return c;
}

std::vector<Sample> tiny_data(int n, std::uint64_t seed) {
  SynthConfig c;
  c.height = c.width = 32;
  c.min_size = 6;
  c.max_size = 10;
  c.min_objects = 2;
  c.max_objects = 3;
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) out.push_back(synth_scene(c, mix_seed(seed, 0, i)));
  return out;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.crop_h = t.crop_w = 32;
  t.batch_size = 2;
  t.epochs = 3;
  t.base_lr = 0.01;
  t.seed = 4;
  return t;
}

const CameraIntrinsics kCam{32, 32, 15.5, 15.5};

Sample coordinate_sample(int h, int w) {
  Sample s;
  s.rgb = Tensor<double>({3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  Tensor<double> z({1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  s.label = LabelMap({static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      s.rgb(0, y, x) = static_cast<double>(x) / w;
      s.rgb(1, y, x) = static_cast<double>(y) / h;
      s.rgb(2, y, x) = 0.5;
      z(0, y, x) = 1.0 + 0.1 * x;
      s.label(y, x) = (x / 4 + y / 4) % 3;
    }
  }
  s.depth = DepthMap::from_values(z);
  return s;
}

}  // namespace

TEST_CASE("poly learning-rate schedule") {
  CHECK(poly_lr(0, 100, 5e-3, 0.9) == 5e-3);
  CHECK(poly_lr(100, 100, 5e-3, 0.9) == 0.0);
  CHECK(poly_lr(150, 100, 5e-3, 0.9) == 0.0);
  CHECK(poly_lr(50, 100, 5e-3, 0.9) == 5e-3 * std::pow(0.5, 0.9));
  CHECK_THROWS_AS(poly_lr(0, 0, 5e-3, 0.9), Error);

  TrainConfig c;
  c.base_lr = 1.0;
  c.poly_power = 1.0;
  c.lr_step_granularity = "epoch";
  c.lr_step_epochs = 2;
  // 10 steps per epoch, 100 steps total: lr only changes every 20 steps.
  CHECK(scheduled_lr(c, 0, 100, 10) == 1.0);
  CHECK(scheduled_lr(c, 19, 100, 10) == 1.0);
  CHECK(scheduled_lr(c, 20, 100, 10) == doctest::Approx(0.8));
  c.lr_step_granularity = "iteration";
  CHECK(scheduled_lr(c, 19, 100, 10) == doctest::Approx(0.81));
}

TEST_CASE("momentum SGD") {
  Param<double> w("w", {3}), g("norm.g", {1}, false);
  w.value[0] = 1.0;
  w.value[1] = -2.0;
  w.value[2] = 0.5;
  g.value[0] = 1.0;
  std::vector<Param<double>*> ps{&w, &g};

  SUBCASE("zero gradients and zero decay leave parameters unchanged") {
    SgdState<double> st;
    const auto before = w.value;
    sgd_step(ps, st, 0.1, 0.9, 0.0);
    CHECK(w.value == before);
  }
  SUBCASE("single step without momentum") {
    SgdState<double> st;
    w.grad[0] = 0.3;
    g.grad[0] = 0.2;
    sgd_step(ps, st, 0.1, 0.0, 0.01);
    CHECK(w.value[0] == 1.0 - 0.1 * (0.3 + 0.01 * 1.0));
    CHECK(g.value[0] == 1.0 - 0.1 * 0.2);  // no decay on norm parameters
  }
  SUBCASE("two steps match the unrolled recurrence") {
    SgdState<double> st;
    const double lr = 0.05, mu = 0.9, wd = 1e-3;
    const double g1[3] = {0.1, -0.2, 0.3}, g2[3] = {-0.4, 0.5, 0.25};
    double p[3] = {1.0, -2.0, 0.5}, v[3] = {0, 0, 0};
    for (int i = 0; i < 3; ++i) w.grad[i] = g1[i];
    sgd_step(ps, st, lr, mu, wd);
    for (int i = 0; i < 3; ++i) w.grad[i] = g2[i];
    sgd_step(ps, st, lr, mu, wd);
    for (int i = 0; i < 3; ++i) {
      v[i] = mu * v[i] + g1[i] + wd * p[i];
      p[i] -= lr * v[i];
      v[i] = mu * v[i] + g2[i] + wd * p[i];
      p[i] -= lr * v[i];
      CHECK(std::abs(w.value[i] - p[i]) <= 1e-12);
    }
  }
}

TEST_CASE("augmentation") {
  const auto s = coordinate_sample(24, 32);
  TrainConfig cfg;
  cfg.crop_h = 24;
  cfg.crop_w = 32;

  const auto id = apply_augment(s, {1.0, 0, 0, false}, 24, 32);
  CHECK(id.rgb == s.rgb);
  CHECK(id.label == s.label);
  CHECK(id.depth.values == s.depth.values);

  const auto once = apply_augment(s, {1.0, 0, 0, true}, 24, 32);
  CHECK(once.rgb(0, 3, 0) == s.rgb(0, 3, 31));
  CHECK(once.label(5, 2) == s.label(5, 29));
  CHECK(once.depth.values(0, 7, 1) == s.depth.values(0, 7, 30));
  const auto twice = apply_augment(once, {1.0, 0, 0, true}, 24, 32);
  CHECK(twice.rgb == s.rgb);
  CHECK(twice.label == s.label);

  // Downscaling by 2 samples source column 8.5 for output column 4 and
  // divides depth values by the scale.
  const auto half = apply_augment(s, {0.5, 0, 0, false}, 12, 16);
  CHECK(half.depth.values(0, 4, 4) == doctest::Approx((1.0 + 0.1 * 8.5) / 0.5));

  // Random draws keep the label value set and pad with ignore.
  std::mt19937_64 rng(8);
  const std::set<int> allowed{0, 1, 2, kIgnoreLabel};
  bool saw_ignore = false;
  for (int t = 0; t < 30; ++t) {
    const auto a = augment(s, cfg, rng);
    CHECK(a.rgb.shape() == Shape{3, 24, 32});
    CHECK(a.label.shape() == Shape{24, 32});
    for (std::size_t i = 0; i < a.label.numel(); ++i) {
      CHECK(allowed.count(a.label[i]) == 1);
      if (a.label[i] == kIgnoreLabel) {
        saw_ignore = true;
        CHECK(a.depth.valid[i] == 0);
      }
    }
  }
  CHECK(saw_ignore);

  // The same draw is applied to every modality: the rgb coordinate channels
  // and the depth ramp must agree on the source column.
  const auto a = apply_augment(s, {1.0, 2, 3, true}, 16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const double src_x = a.rgb(0, y, x) * 32;
      CHECK(a.depth.values(0, y, x) == doctest::Approx(1.0 + 0.1 * src_x));
      CHECK(a.rgb(1, y, x) * 24 == doctest::Approx(y + 2));
      CHECK(a.label(y, x) == s.label(y + 2, static_cast<int>(std::lround(src_x))));
    }
}

TEST_CASE("median-frequency class weights") {
  auto w = compute_class_weights({1, 3});
  CHECK(w.weights[0] == doctest::Approx(2.0));
  CHECK(w.weights[1] == doctest::Approx(2.0 / 3.0));
  CHECK_FALSE(w.has_absent);

  w = compute_class_weights({5, 5, 5, 5});
  for (double v : w.weights) CHECK(v == 1.0);

  w = compute_class_weights({2, 0, 6, 4});
  CHECK(w.has_absent);
  CHECK(w.weights[1] == 0.0);
  const auto p = compute_class_weights({6, 4, 2, 0});
  CHECK(p.weights[0] == w.weights[2]);
  CHECK(p.weights[1] == w.weights[3]);
  CHECK(p.weights[2] == w.weights[0]);
  CHECK_THROWS_AS(compute_class_weights({0, 0}), Error);
}

TEST_CASE("lr = 0 leaves learnable parameters bit-identical") {
  const auto data = tiny_data(4, 1);
  SegModel<float> m(tiny_net());
  std::vector<Tensor<float>> before;
  for (auto* p : m.params()) before.push_back(p->value);
  auto cfg = tiny_train();
  cfg.base_lr = 0.0;
  cfg.epochs = 1;
  fit(m, data, {}, kCam, 6, cfg);
  auto ps = m.params();
  for (std::size_t i = 0; i < ps.size(); ++i) CHECK(ps[i]->value == before[i]);
}

TEST_CASE("fit is reproducible and resumes exactly") {
  const auto train = tiny_data(6, 2), val = tiny_data(2, 3);
  const fs::path root = fs::temp_directory_path() / "sconv_test_fit";
  fs::remove_all(root);
  auto cfg = tiny_train();

  SegModel<float> a(tiny_net()), b(tiny_net());
  FitOptions oa;
  oa.out_dir = root / "a";
  const auto ra = fit(a, train, val, kCam, 6, cfg, oa);
  const auto rb = fit(b, train, val, kCam, 6, cfg);
  CHECK(ra.first_batch_loss == rb.first_batch_loss);
  CHECK(std::isfinite(ra.first_batch_loss));
  CHECK(ra.iterations == 9);
  REQUIRE(ra.history.size() == 3);
  CHECK(ra.history.back().val.miou == rb.history.back().val.miou);
  CHECK(fs::exists(root / "a" / "train_log.jsonl"));
  CHECK(fs::exists(root / "a" / "metrics.json"));
  CHECK(fs::exists(root / "a" / "metrics_epoch3.json"));
  CHECK(fs::exists(root / "a" / "checkpoints" / "best" / "manifest.json"));

  SegModel<float> c(tiny_net());
  FitOptions oc;
  oc.out_dir = root / "c";
  oc.stop_after_epochs = 1;
  CHECK(fit(c, train, val, kCam, 6, cfg, oc).history.size() == 1);
  SegModel<float> d(tiny_net(99));
  oc.stop_after_epochs = 0;
  oc.resume = true;
  const auto rd = fit(d, train, val, kCam, 6, cfg, oc);
  CHECK(rd.history.size() == 2);
  CHECK(rd.iterations == 9);
  auto sa = a.state(), sd = d.state();
  REQUIRE(sa.size() == sd.size());
  for (std::size_t i = 0; i < sa.size(); ++i) CHECK(sa[i]->value == sd[i]->value);
  CHECK(rd.history.back().val.miou == ra.history.back().val.miou);
}

TEST_CASE("non-finite loss aborts with a diagnostic dump") {
  const auto data = tiny_data(2, 5);
  const fs::path root = fs::temp_directory_path() / "sconv_test_nan";
  fs::remove_all(root);
  SegModel<float> m(tiny_net());
  m.params().back()->value[0] = std::numeric_limits<float>::quiet_NaN();
  FitOptions o;
  o.out_dir = root;
  try {
    fit(m, data, {}, kCam, 6, tiny_train(), o);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numeric);
  }
  CHECK(fs::exists(root / "nan_dump.json"));
}

TEST_CASE("training config validation") {
  TrainConfig c;
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.lr_step_granularity = "weekly";
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.base_lr = -1;
  CHECK_THROWS_AS(c.validate(), Error);
}

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "oracles.hpp"
#include "sconv/checkpoint.hpp"
#include "sconv/ops.hpp"
#include "sconv/sgnet.hpp"

using namespace sconv;
namespace fs = std::filesystem;

namespace {

NetworkConfig tiny(std::uint64_t seed = 3) {
  NetworkConfig c;
  c.widths = {4, 8};
  c.blocks = 2;
  c.sconv_policy = NetworkConfig::default_policy(2, 2);
  c.decoder_channels = 8;
  c.decoder_convs = 1;
  c.f_hidden = 4;
  c.seed = seed;
  return c;
}

template <typename T>
void randomize_generators(SegModel<T>& m, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto* p : m.params())
    if (p->name.find(".eta.") != std::string::npos || p->name.find(".f.") != std::string::npos)
      for (auto& v : p->value.values()) v = static_cast<T>(u(rng));
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_CASE("S-Conv placement follows the policy") {
  NetworkConfig c;
  CHECK(SegModel<float>(c).sconv_count() == 12);
  CHECK(SegModel<float>(c.baseline()).sconv_count() == 0);
  CHECK(c.output_stride() == 16);

  const auto layers = SegModel<float>(c).sconv_layers();
  REQUIRE(layers.size() == 12);
  CHECK(layers[0].name == "stage1.block0.conv0");
  CHECK(layers[1].name == "stage1.block1.conv0");
  CHECK(layers[2].name == "stage1.block1.conv1");

  NetworkConfig bad = tiny();
  bad.sconv_policy = {{0, 7}, {}};
  CHECK_THROWS_AS(bad.validate(), Error);
  bad.sconv_policy = {{0}};
  CHECK_THROWS_AS(SegModel<float>{bad}, Error);
  bad = tiny();
  bad.widths = {};
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("parameter accounting") {
  for (const auto& cfg : {NetworkConfig{}, NetworkConfig{}.baseline(), tiny(), tiny().baseline()}) {
    SegModel<float> m(cfg);
    const auto got = m.count_params();
    const auto want = expected_param_count(cfg);
    CHECK(got.total == want.total);
    CHECK(got.backbone == want.backbone);
    CHECK(got.sconv_extra == want.sconv_extra);
    CHECK(got.decoder == want.decoder);
    CHECK(got.backbone + got.sconv_extra + got.decoder == got.total);
    std::size_t sum = 0;
    for (auto* p : m.params()) sum += p->numel();
    CHECK(sum == got.total);
  }
  CHECK(SegModel<float>(NetworkConfig{}.baseline()).count_params().sconv_extra == 0);
  // The twins differ exactly by the S-Conv extras.
  const auto s = expected_param_count(NetworkConfig{});
  const auto b = expected_param_count(NetworkConfig{}.baseline());
  CHECK(s.total - b.total == s.sconv_extra);
}

TEST_CASE("forward shapes, aux head and resolution checks") {
  SegModel<double> m(tiny());
  auto img = oracle::random_tensor<double>({3, 32, 48}, 1);
  auto sp = oracle::random_tensor<double>({1, 32, 48}, 2);
  auto out = m.forward(img, sp, Mode::train);
  CHECK(out.logits.shape() == Shape{6, 32, 48});
  REQUIRE(out.aux.has_value());
  CHECK(out.aux->shape() == Shape{6, 32, 48});

  auto no_aux = tiny();
  no_aux.deep_supervision = false;
  SegModel<double> m2(no_aux);
  CHECK_FALSE(m2.forward(img, sp, Mode::eval).aux.has_value());

  auto wrong = oracle::random_tensor<double>({1, 32, 40}, 2);
  try {
    m.forward(img, wrong, Mode::eval);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::dimension);
  }
  auto wrong_c = oracle::random_tensor<double>({3, 32, 48}, 2);
  CHECK_THROWS_AS(m.forward(img, wrong_c, Mode::eval), Error);
}

TEST_CASE("spatial dependence") {
  auto img = oracle::random_tensor<double>({3, 32, 32}, 4);
  auto sp = oracle::random_tensor<double>({1, 32, 32}, 5);
  auto sp2 = sp;
  for (auto& v : sp2.values()) v += 0.3 * v * v;

  SegModel<double> base(tiny().baseline());
  CHECK(base.forward(img, sp, Mode::eval).logits == base.forward(img, sp2, Mode::eval).logits);

  SegModel<double> sg(tiny());
  randomize_generators(sg, 11, 0.3);
  const auto a = sg.forward(img, sp, Mode::eval).logits;
  const auto b = sg.forward(img, sp2, Mode::eval).logits;
  CHECK(max_abs_diff(a, b) > 0.0);
}

TEST_CASE("degenerate SGNet reproduces the baseline twin exactly") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    SegModel<double> base(tiny(seed).baseline());
    SegModel<double> sg(tiny(seed + 100));
    randomize_generators(sg, seed, 0.5);
    const int copied = sg.copy_state_from(base);
    CHECK(copied == static_cast<int>(base.state().size()));
    sg.set_degenerate(true);
    auto img = oracle::random_tensor<double>({3, 32, 32}, seed + 7);
    auto sp = oracle::random_tensor<double>({1, 32, 32}, seed + 8);
    for (Mode mode : {Mode::eval, Mode::train}) {
      const auto a = base.forward(img, sp, mode);
      const auto b = sg.forward(img, sp, mode);
      CHECK(max_abs_diff(a.logits, b.logits) == 0.0);
      CHECK(max_abs_diff(*a.aux, *b.aux) == 0.0);
    }
  }
}

TEST_CASE("initialization is seed deterministic and checkpoints round trip") {
  const fs::path root = fs::temp_directory_path() / "sconv_test_ckpt";
  fs::remove_all(root);
  SegModel<float> a(tiny(5)), b(tiny(5)), c(tiny(6));
  save_checkpoint(a, root / "a");
  save_checkpoint(b, root / "b");
  save_checkpoint(c, root / "c");
  bool differs = false;
  for (const auto& e : fs::directory_iterator(root / "a")) {
    CHECK(slurp(e.path()) == slurp(root / "b" / e.path().filename()));
    if (slurp(e.path()) != slurp(root / "c" / e.path().filename())) differs = true;
  }
  CHECK(differs);

  SegModel<double> trained(tiny(8));
  randomize_generators(trained, 3, 0.2);
  auto img = oracle::random_tensor<double>({3, 16, 16}, 1);
  auto sp = oracle::random_tensor<double>({1, 16, 16}, 2);
  trained.forward(img, sp, Mode::train);  // moves running statistics
  SgdState<double> opt;
  for (auto* p : trained.params()) opt.velocity.push_back(p->value);
  opt.iteration = 17;
  save_checkpoint(trained, root / "d", &opt, {{"epoch", 2}});

  SgdState<double> opt2;
  nlohmann::json ts;
  auto loaded = load_checkpoint<double>(root / "d", &opt2, &ts);
  CHECK(loaded->config().widths == tiny().widths);
  CHECK(ts["epoch"] == 2);
  CHECK(opt2.iteration == 17);
  REQUIRE(opt2.velocity.size() == opt.velocity.size());
  for (std::size_t i = 0; i < opt.velocity.size(); ++i) CHECK(opt2.velocity[i] == opt.velocity[i]);
  auto sa = trained.state(), sb = loaded->state();
  REQUIRE(sa.size() == sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    CHECK(sa[i]->name == sb[i]->name);
    CHECK(sa[i]->value == sb[i]->value);
  }
  CHECK(trained.forward(img, sp, Mode::eval).logits == loaded->forward(img, sp, Mode::eval).logits);

  // Loading into a model with a different registry fails.
  SegModel<double> other(tiny().baseline());
  CHECK_THROWS_AS(load_checkpoint_into(other, root / "d"), Error);
  CHECK_THROWS_AS(load_checkpoint<double>(root / "missing"), Error);
}

TEST_CASE("receptive-field maps") {
  auto img = oracle::random_tensor<double>({3, 32, 32}, 4);
  auto sp = oracle::random_tensor<double>({1, 32, 32}, 5);
  SegModel<double> fresh(tiny());
  const auto maps = receptive_field_map(fresh, img, sp);
  CHECK(maps.size() == static_cast<std::size_t>(fresh.sconv_count()));
  for (const auto& m : maps)
    for (double v : m.map.values()) CHECK(v == 0.0);

  SegModel<double> base(tiny().baseline());
  CHECK(receptive_field_map(base, img, sp).empty());

  SegModel<double> sg(tiny());
  randomize_generators(sg, 21, 0.3);
  auto sp2 = sp;
  for (auto& v : sp2.values()) v = -v;
  const auto m1 = receptive_field_map(sg, img, sp);
  const auto m2 = receptive_field_map(sg, img, sp2);
  double diff = 0;
  for (std::size_t i = 0; i < m1.size(); ++i) {
    double lo = 1e9, hi = -1e9;
    for (double v : m1[i].map.values()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    CHECK(lo >= 0.0);
    CHECK(hi <= 255.0);
    diff = std::max(diff, max_abs_diff(m1[i].map, m2[i].map));
  }
  CHECK(diff > 0.0);
  CHECK(rf_file_name(2, 1, 0) == "rf_stage2_block1_conv0.png");
}

TEST_CASE("spatial input construction") {
  Tensor<double> z({1, 8, 8}, 2.0);
  for (std::size_t i = 0; i < 64; ++i) z[i] += 0.01 * static_cast<double>(i);
  z[9] = 0.0;
  const auto d = DepthMap::from_values(z);
  const CameraIntrinsics k{8, 8, 3.5, 3.5};
  const auto raw = build_spatial_input(d, k, SpatialSource::depth, false);
  CHECK(raw.shape() == Shape{1, 8, 8});
  CHECK(raw[9] > 0.0);
  CHECK(raw[20] == z[20]);
  const auto norm = build_spatial_input(d, k, SpatialSource::depth, true);
  double mean = 0;
  for (double v : norm.values()) mean += v;
  CHECK(std::abs(mean / 64) < 1e-12);
  CHECK(build_spatial_input(d, k, SpatialSource::hha, true).shape() == Shape{3, 8, 8});
  CHECK(build_spatial_input(d, k, SpatialSource::coords, false).shape() == Shape{3, 8, 8});
  CHECK_THROWS_AS(build_spatial_input(d, k, SpatialSource::rgb_feature, false), Error);
}

TEST_CASE("whole-model gradients match finite differences") {
  auto cfg = tiny(4);
  SegModel<double> m(cfg);
  randomize_generators(m, 5, 0.3);
  auto img = oracle::random_tensor<double>({3, 16, 16}, 6);
  auto sp = oracle::random_tensor<double>({1, 16, 16}, 7);
  LabelMap label({16, 16});
  std::mt19937_64 rng(8);
  for (std::size_t i = 0; i < label.numel(); ++i) label[i] = static_cast<int>(rng() % 6);
  const Tensor<double>* none = nullptr;
  auto loss = [&]() {
    const auto out = m.forward(img, sp, Mode::train);
    return softmax_cross_entropy(out.logits, label, 255, none).loss +
           0.4 * softmax_cross_entropy(*out.aux, label, 255, none).loss;
  };
  m.zero_grad();
  {
    const auto out = m.forward(img, sp, Mode::train);
    auto ce = softmax_cross_entropy(out.logits, label, 255, none);
    auto ace = softmax_cross_entropy(*out.aux, label, 255, none);
    for (auto& g : ace.grad_logits.values()) g *= 0.4;
    m.backward(ce.grad_logits, &ace.grad_logits);
  }
  const double h = 1e-6;
  for (auto* p : m.params()) {
    double worst = 0, scale = 0;
    const std::size_t n = p->numel();
    for (std::size_t j = 0; j < std::min<std::size_t>(n, 6); ++j) {
      const std::size_t i = (j * 7919) % n;
      const double v = p->value[i];
      p->value[i] = v + h;
      const double lp = loss();
      p->value[i] = v - h;
      const double lm = loss();
      p->value[i] = v;
      const double num = (lp - lm) / (2 * h);
      worst = std::max(worst, std::abs(num - p->grad[i]));
      scale = std::max({scale, std::abs(num), std::abs(p->grad[i])});
    }
    INFO(p->name << " abs err " << worst << " scale " << scale);
    CHECK(worst <= 1e-5 * std::max(scale, 1e-3));
  }
}

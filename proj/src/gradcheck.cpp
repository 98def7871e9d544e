#include "sconv/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "sconv/layers.hpp"
#include "sconv/ops.hpp"
#include "sconv/sconv_op.hpp"

namespace sconv {

namespace {

using TD = Tensor<double>;

TD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  TD t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

double dot(const TD& a, const TD& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

void hash_signs(RegionHasher& h, const TD& t) {
  for (std::size_t i = 0; i < t.numel(); ++i) h.add(t[i] > 0 ? 1 : 0);
}

void hash_taps(RegionHasher& h, const std::vector<SampleTap<double>>& taps) {
  for (const auto& t : taps) {
    for (auto i : t.idx) h.add(static_cast<std::uint64_t>(static_cast<std::int64_t>(i)));
  }
}

// ---------------------------------------------------------------------------

GradCheckCase conv2d_case(std::uint64_t seed) {
  struct S {
    TD x, w, b, r;
    ConvGeometry g;
  };
  std::mt19937_64 rng(seed);
  auto s = std::make_shared<S>();
  const int stride = 1 + static_cast<int>(seed % 2);
  s->g = ConvGeometry::square(3, stride, 1);
  s->x = random_tensor({2, 5, 5}, rng);
  s->w = random_tensor({3, 2, 3, 3}, rng);
  s->b = random_tensor({3}, rng);
  const auto oh = static_cast<std::size_t>(s->g.out_h(5));
  s->r = random_tensor({3, oh, oh}, rng);
  GradCheckCase c;
  c.op = "conv2d";
  c.groups = {{"input", &s->x}, {"weight", &s->w}, {"bias", &s->b}};
  c.loss = [s] { return dot(conv2d_forward(s->x, s->w, &s->b, s->g), s->r); };
  c.analytic = [s] {
    Conv2dCache<double> cache;
    conv2d_forward(s->x, s->w, &s->b, s->g, &cache);
    return conv2d_backward(cache, s->r).grads;
  };
  c.region = [] { return std::uint64_t{0}; };
  c.owner = s;
  return c;
}

GradCheckCase fc_case(std::uint64_t seed) {
  struct S {
    TD x, w, b, r;
  };
  std::mt19937_64 rng(seed);
  auto s = std::make_shared<S>();
  s->x = random_tensor({7}, rng);
  s->w = random_tensor({5, 7}, rng);
  s->b = random_tensor({5}, rng);
  s->r = random_tensor({5}, rng);
  GradCheckCase c;
  c.op = "fully_connected";
  c.groups = {{"input", &s->x}, {"weight", &s->w}, {"bias", &s->b}};
  c.loss = [s] { return dot(fully_connected(s->x, s->w, s->b), s->r); };
  c.analytic = [s] { return fully_connected_backward(s->x, s->w, s->r).grads; };
  c.region = [] { return std::uint64_t{0}; };
  c.owner = s;
  return c;
}

GradCheckCase activation_case(Activation kind, std::uint64_t seed) {
  struct S {
    TD x, r;
  };
  std::mt19937_64 rng(seed);
  auto s = std::make_shared<S>();
  s->x = random_tensor({3, 4, 4}, rng, -3.0, 3.0);
  s->r = random_tensor({3, 4, 4}, rng);
  GradCheckCase c;
  c.op = kind == Activation::relu ? "relu" : "sigmoid";
  c.groups = {{"input", &s->x}};
  c.loss = [s, kind] { return dot(activation_forward(kind, s->x), s->r); };
  c.analytic = [s, kind] {
    auto y = activation_forward(kind, s->x);
    std::map<std::string, TD> g;
    g.emplace("input", activation_backward(kind, s->x, y, s->r));
    return g;
  };
  c.region = [s] {
    RegionHasher h;
    hash_signs(h, s->x);
    return h.h;
  };
  c.owner = s;
  return c;
}

GradCheckCase bilinear_sample_case(std::uint64_t seed) {
  struct S {
    TD map, coord, r;
  };
  std::mt19937_64 rng(seed);
  auto s = std::make_shared<S>();
  s->map = random_tensor({3, 4, 5}, rng);
  s->coord = TD({2});
  std::uniform_real_distribution<double> ux(-0.9, 4.9), uy(-0.9, 3.9);
  s->coord[0] = ux(rng);
  s->coord[1] = uy(rng);
  s->r = random_tensor({3}, rng);
  GradCheckCase c;
  c.op = "bilinear_sample";
  c.groups = {{"map", &s->map}, {"coord", &s->coord}};
  c.loss = [s] { return dot(bilinear_sample(s->map, s->coord[0], s->coord[1]), s->r); };
  c.analytic = [s] { return bilinear_sample_backward(s->map, s->coord[0], s->coord[1], s->r).grads; };
  c.region = [s] {
    RegionHasher h;
    h.add(static_cast<std::uint64_t>(std::floor(s->coord[0]) + 16));
    h.add(static_cast<std::uint64_t>(std::floor(s->coord[1]) + 16));
    return h.h;
  };
  c.owner = s;
  return c;
}

GradCheckCase bilinear_resize_case(std::uint64_t seed) {
  struct S {
    TD map, r;
  };
  std::mt19937_64 rng(seed);
  auto s = std::make_shared<S>();
  s->map = random_tensor({2, 5, 7}, rng);
  s->r = random_tensor({2, 9, 4}, rng);
  GradCheckCase c;
  c.op = "bilinear_resize";
  c.groups = {{"map", &s->map}};
  c.loss = [s] { return dot(bilinear_resize(s->map, 9, 4), s->r); };
  c.analytic = [s] {
    std::map<std::string, TD> g;
    g.emplace("map", bilinear_resize_backward(s->r, 5, 7));
    return g;
  };
  c.region = [] { return std::uint64_t{0}; };
  c.owner = s;
  return c;
}

GradCheckCase softmax_ce_case(std::uint64_t seed) {
  struct S {
    TD logits, weights;
    LabelMap labels;
  };
  std::mt19937_64 rng(seed);
  auto s = std::make_shared<S>();
  s->logits = random_tensor({3, 2, 2}, rng, -2.0, 2.0);
  s->weights = random_tensor({3}, rng, 0.5, 2.0);
  s->labels = LabelMap({2, 2});
  std::uniform_int_distribution<int> lab(0, 2);
  for (auto& v : s->labels.values()) v = lab(rng);
  s->labels[seed % 4] = 255;
  GradCheckCase c;
  c.op = "softmax_cross_entropy";
  c.groups = {{"logits", &s->logits}};
  c.loss = [s] { return softmax_cross_entropy(s->logits, s->labels, 255, &s->weights).loss; };
  c.analytic = [s] {
    std::map<std::string, TD> g;
    g.emplace("logits", softmax_cross_entropy(s->logits, s->labels, 255, &s->weights).grad_logits);
    return g;
  };
  c.region = [] { return std::uint64_t{0}; };
  c.owner = s;
  return c;
}

GradCheckCase channel_norm_case(std::uint64_t seed) {
  struct S {
    TD x, r;
    ChannelNorm<double> norm{"norm", 3};
  };
  std::mt19937_64 rng(seed);
  auto s = std::make_shared<S>();
  s->x = random_tensor({3, 4, 5}, rng);
  s->r = random_tensor({3, 4, 5}, rng);
  for (auto* p : s->norm.params()) p->value = random_tensor(p->value.shape(), rng, 0.5, 1.5);
  GradCheckCase c;
  c.op = "channel_norm";
  c.groups = {{"input", &s->x}};
  for (auto* p : s->norm.params()) c.groups.emplace_back(p->name, &p->value);
  c.loss = [s] { return dot(s->norm.forward(s->x, Mode::train), s->r); };
  c.analytic = [s] {
    for (auto* p : s->norm.params()) p->zero_grad();
    s->norm.forward(s->x, Mode::train);
    std::map<std::string, TD> g;
    g.emplace("input", s->norm.backward(s->r));
    for (auto* p : s->norm.params()) g.emplace(p->name, p->grad);
    return g;
  };
  c.region = [] { return std::uint64_t{0}; };
  c.owner = s;
  return c;
}

// Random guidance parameters so offsets are fractional and the mask varies.
void randomize_guidance(SConvState<double>& st, std::mt19937_64& rng) {
  st.eta_weight().value = random_tensor(st.eta_weight().value.shape(), rng, -0.05, 0.05);
  st.eta_bias().value = random_tensor(st.eta_bias().value.shape(), rng, -0.5, 0.5);
  st.f1_weight().value = random_tensor(st.f1_weight().value.shape(), rng, -0.3, 0.3);
  st.f1_bias().value = random_tensor(st.f1_bias().value.shape(), rng, -0.5, 0.5);
  st.f0_bias().value = random_tensor(st.f0_bias().value.shape(), rng, -0.1, 0.1);
}

GradCheckCase sconv_case(std::uint64_t seed) {
  struct S {
    TD x, sp, r;
    SConvState<double> st;
  };
  std::mt19937_64 rng(seed);
  auto s = std::make_shared<S>();
  SConvOptions opt;
  opt.in_channels = 2;
  opt.out_channels = 2;
  opt.geom = ConvGeometry::square(3);
  opt.bias = true;
  opt.f_hidden = 32;
  s->st = SConvState<double>(opt, rng);
  randomize_guidance(s->st, rng);
  s->st.bias().value = random_tensor({2}, rng);
  s->x = random_tensor({2, 5, 5}, rng);
  s->sp = random_tensor({kProjectedChannels, 5, 5}, rng, 0.0, 1.0);
  s->r = random_tensor({2, 5, 5}, rng);
  GradCheckCase c;
  c.op = "sconv";
  c.groups = {{"input", &s->x}, {"spatial", &s->sp}};
  for (auto* p : s->st.params()) c.groups.emplace_back(p->name, &p->value);
  c.loss = [s] {
    ProjectedSpatial<double> sp{s->sp, SpatialSource::depth};
    return dot(s->st.forward(s->x, sp), s->r);
  };
  c.analytic = [s] {
    ProjectedSpatial<double> sp{s->sp, SpatialSource::depth};
    s->st.forward(s->x, sp);
    return sconv_backward(s->st, s->r).grads;
  };
  c.region = [s] {
    RegionHasher h;
    hash_taps(h, s->st.last_taps());
    hash_signs(h, s->st.last_hidden_pre());
    return h.h;
  };
  c.owner = s;
  return c;
}

// Raw spatial -> projector -> resize -> strided S-Conv.
GradCheckCase sconv_full_case(std::uint64_t seed) {
  struct S {
    TD x, spatial, r;
    SpatialProjector<double> phi;
    SConvState<double> st;
  };
  std::mt19937_64 rng(seed);
  auto s = std::make_shared<S>();
  s->phi = SpatialProjector<double>(1, rng);
  for (auto* p : s->phi.params()) {
    if (p->name.ends_with(".b")) p->value = random_tensor(p->value.shape(), rng, 0.0, 0.2);
  }
  SConvOptions opt;
  opt.in_channels = 2;
  opt.out_channels = 3;
  opt.geom = ConvGeometry::square(3, 2, 1);
  opt.f_hidden = 16;
  s->st = SConvState<double>(opt, rng);
  randomize_guidance(s->st, rng);
  s->x = random_tensor({2, 4, 4}, rng);
  s->spatial = random_tensor({1, 6, 6}, rng, 0.5, 2.0);
  s->r = random_tensor({3, 2, 2}, rng);
  GradCheckCase c;
  c.op = "sconv_full";
  c.groups = {{"input", &s->x}, {"spatial_raw", &s->spatial}};
  for (auto* p : s->phi.params()) c.groups.emplace_back(p->name, &p->value);
  for (auto* p : s->st.params()) c.groups.emplace_back(p->name, &p->value);
  auto forward = [](S& st) {
    auto sp = st.phi.forward(st.spatial, SpatialSource::depth);
    auto spr = resize_spatial(sp, 4, 4);
    return st.st.forward(st.x, spr);
  };
  c.loss = [s, forward] { return dot(forward(*s), s->r); };
  c.analytic = [s, forward] {
    for (auto* p : s->phi.params()) p->zero_grad();
    forward(*s);
    auto g = sconv_backward(s->st, s->r);
    auto gsp = bilinear_resize_backward(g.grad("spatial"), 6, 6);
    auto graw = s->phi.backward(gsp);
    auto out = std::move(g.grads);
    out.erase("spatial");
    out.emplace("spatial_raw", std::move(graw));
    for (auto* p : s->phi.params()) out.emplace(p->name, p->grad);
    return out;
  };
  c.region = [s] {
    RegionHasher h;
    for (const auto& pre : s->phi.last_pre_activations()) hash_signs(h, pre);
    hash_taps(h, s->st.last_taps());
    hash_signs(h, s->st.last_hidden_pre());
    return h.h;
  };
  c.owner = s;
  return c;
}

}  // namespace

std::vector<std::string> gradcheck_ops() {
  return {"conv2d",          "fully_connected",       "relu",         "sigmoid",
          "bilinear_sample", "bilinear_resize",       "softmax_cross_entropy",
          "channel_norm",    "sconv",                 "sconv_full"};
}

GradCheckCase make_gradcheck_case(const std::string& op, std::uint64_t seed) {
  if (op == "conv2d") return conv2d_case(seed);
  if (op == "fully_connected") return fc_case(seed);
  if (op == "relu") return activation_case(Activation::relu, seed);
  if (op == "sigmoid") return activation_case(Activation::sigmoid, seed);
  if (op == "bilinear_sample") return bilinear_sample_case(seed);
  if (op == "bilinear_resize") return bilinear_resize_case(seed);
  if (op == "softmax_cross_entropy") return softmax_ce_case(seed);
  if (op == "channel_norm") return channel_norm_case(seed);
  if (op == "sconv") return sconv_case(seed);
  if (op == "sconv_full") return sconv_full_case(seed);
  fail(ErrorKind::config, fmt::format("unknown gradcheck op '{}'", op));
}

std::vector<GroupResult> run_gradcheck(GradCheckCase& c, const GradCheckOptions& opt,
                                       std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  c.loss();
  const std::uint64_t base_region = c.region();
  auto analytic = c.analytic();
  std::vector<GroupResult> results;
  for (auto& [name, tensor] : c.groups) {
    GroupResult r;
    r.op = c.op;
    r.group = name;
    auto it = analytic.find(name);
    if (it == analytic.end()) {
      fail(ErrorKind::state, fmt::format("{}: no analytic gradient for '{}'", c.op, name));
    }
    TD a = it->second;
    check_shape(a, tensor->shape(), "analytic gradient");
    if (opt.flip_sign_group && *opt.flip_sign_group == name) {
      for (auto& v : a.values()) v = -v;
    }
    std::vector<std::size_t> idx(tensor->numel());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t want =
        opt.max_entries == 0 ? idx.size() : std::min(opt.max_entries, idx.size());
    double max_diff = 0, max_mag = 0;
    for (std::size_t n = 0; n < idx.size() && r.checked < want; ++n) {
      const std::size_t i = idx[n];
      const double orig = (*tensor)[i];
      (*tensor)[i] = orig + opt.step;
      const double lp = c.loss();
      const bool same_p = c.region() == base_region;
      (*tensor)[i] = orig - opt.step;
      const double lm = c.loss();
      const bool same_m = c.region() == base_region;
      (*tensor)[i] = orig;
      if (!same_p || !same_m) {
        ++r.skipped_kinks;
        continue;
      }
      const double num = (lp - lm) / (2 * opt.step);
      max_diff = std::max(max_diff, std::abs(num - a[i]));
      max_mag = std::max({max_mag, std::abs(num), std::abs(a[i])});
      ++r.checked;
    }
    c.loss();  // restore caches at the base point
    r.max_rel_error = max_mag > 0 ? max_diff / max_mag : max_diff;
    r.passed = r.checked > 0 && r.max_rel_error <= opt.tolerance;
    results.push_back(r);
  }
  return results;
}

}  // namespace sconv

#include "sconv/sgnet.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "sconv/geometry.hpp"

namespace sconv {

std::vector<std::vector<int>> NetworkConfig::default_policy(int stages, int blocks) {
  std::set<int> idx{0, 2 * blocks - 2, 2 * blocks - 1};
  return std::vector<std::vector<int>>(stages, std::vector<int>(idx.begin(), idx.end()));
}

NetworkConfig NetworkConfig::baseline() const {
  NetworkConfig b = *this;
  b.sconv_policy = empty_policy(stages());
  return b;
}

void NetworkConfig::validate() const {
  if (widths.empty()) fail(ErrorKind::config, "network needs at least one stage");
  for (int w : widths) {
    if (w <= 0) fail(ErrorKind::config, "stage widths must be positive");
  }
  if (blocks < 1) fail(ErrorKind::config, "blocks per stage must be >= 1");
  if (num_classes < 2) fail(ErrorKind::config, "num_classes must be >= 2");
  if (static_cast<int>(sconv_policy.size()) != stages()) {
    fail(ErrorKind::config, fmt::format("sconv_policy has {} stage lists for {} stages",
                                        sconv_policy.size(), stages()));
  }
  for (const auto& stage : sconv_policy) {
    for (int i : stage) {
      if (i < 0 || i >= 2 * blocks) {
        fail(ErrorKind::config, fmt::format("sconv_policy index {} outside [0,{})", i, 2 * blocks));
      }
    }
  }
  if (decoder_channels < 1 || decoder_convs < 0) fail(ErrorKind::config, "bad decoder shape");
  if (f_hidden < 0) fail(ErrorKind::config, "f_hidden must be >= 0");
  if (phi_stride < 1) fail(ErrorKind::config, "phi_stride must be >= 1");
  if (source == SpatialSource::rgb_feature) {
    fail(ErrorKind::config, "rgb_feature is not a depth-derived source for SGNet");
  }
}

namespace {

bool in_policy(const NetworkConfig& cfg, int stage, int idx) {
  const auto& p = cfg.sconv_policy[stage];
  return std::find(p.begin(), p.end(), idx) != p.end();
}

int stage_stride(int stage) { return stage == 0 ? 1 : 2; }

}  // namespace

ParamBreakdown expected_param_count(const NetworkConfig& cfg) {
  cfg.validate();
  ParamBreakdown pb;
  const auto g3 = ConvGeometry::square(3);
  const int hidden = cfg.f_hidden > 0 ? cfg.f_hidden : kProjectedChannels * g3.taps();
  auto norm = [](int c) { return static_cast<std::size_t>(2 * c); };
  pb.backbone += host_conv_param_count(3, cfg.widths[0], ConvGeometry::square(3, 2), false) +
                 norm(cfg.widths[0]);
  int cin = cfg.widths[0];
  bool any_sconv = false;
  for (int s = 0; s < cfg.stages(); ++s) {
    const int c = cfg.widths[s];
    for (int b = 0; b < cfg.blocks; ++b) {
      const int stride = b == 0 ? stage_stride(s) : 1;
      for (int k = 0; k < 2; ++k) {
        const int in = k == 0 ? cin : c;
        pb.backbone += host_conv_param_count(in, c, ConvGeometry::square(3, k == 0 ? stride : 1),
                                             false) +
                       norm(c);
        if (in_policy(cfg, s, 2 * b + k)) {
          any_sconv = true;
          pb.sconv_extra +=
              offset_generator_param_count(g3) + weight_generator_param_count(g3.taps(), hidden);
        }
      }
      if (stride != 1 || cin != c) {
        pb.backbone += host_conv_param_count(cin, c, ConvGeometry::square(1, stride, 0), false) +
                       norm(c);
      }
      cin = c;
    }
  }
  if (any_sconv) pb.sconv_extra += projector_param_count(cfg.spatial_channels());
  auto head = [&](int in) {
    std::size_t n = 0;
    int ch = in;
    for (int i = 0; i < cfg.decoder_convs; ++i) {
      n += host_conv_param_count(ch, cfg.decoder_channels, g3, true);
      ch = cfg.decoder_channels;
    }
    return n + host_conv_param_count(ch, cfg.num_classes, ConvGeometry::square(1), true);
  };
  pb.decoder += head(cfg.widths.back());
  if (cfg.deep_supervision && cfg.stages() >= 2) pb.decoder += head(cfg.widths[cfg.stages() - 2]);
  pb.total = pb.backbone + pb.sconv_extra + pb.decoder;
  return pb;
}

Tensor<double> build_spatial_input(const DepthMap& depth, const CameraIntrinsics& k,
                                   SpatialSource source, bool normalize) {
  const DepthMap clean = depth.fully_valid() ? depth : sanitize_depth(depth);
  Tensor<double> s;
  switch (source) {
    case SpatialSource::depth: s = clean.values; break;
    case SpatialSource::hha: s = depth_to_hha(clean, k); break;
    case SpatialSource::coords: s = depth_to_coords(clean, k); break;
    case SpatialSource::rgb_feature:
      fail(ErrorKind::config, "rgb_feature spatial input is not derived from depth");
  }
  return normalize ? normalize_spatial(s) : s;
}

std::string rf_file_name(int stage, int block, int conv) {
  return fmt::format("rf_stage{}_block{}_conv{}.png", stage, block, conv);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <typename T>
struct ConvUnit {
  std::string name;
  bool is_sconv = false;
  Conv2dLayer<T> conv;
  SConvState<T> sconv;
  int in_h = 0, in_w = 0;
};

template <typename T>
struct Block {
  ConvUnit<T> unit[2];
  ChannelNorm<T> norm[2];
  ReluLayer<T> relu[2];
  bool has_proj = false;
  Conv2dLayer<T> proj;
  ChannelNorm<T> proj_norm;
  ReluLayer<T> out_relu;
};

template <typename T>
struct Head {
  std::vector<Conv2dLayer<T>> convs;
  std::vector<ReluLayer<T>> relus;
  Conv2dLayer<T> cls;
  int in_h = 0, in_w = 0;

  void build(const std::string& name, int in, const NetworkConfig& cfg, std::mt19937_64& rng) {
    int ch = in;
    for (int i = 0; i < cfg.decoder_convs; ++i) {
      convs.emplace_back(fmt::format("{}.{}", name, i), ch, cfg.decoder_channels,
                         ConvGeometry::square(3), true, rng);
      relus.emplace_back();
      ch = cfg.decoder_channels;
    }
    cls = Conv2dLayer<T>(name + ".cls", ch, cfg.num_classes, ConvGeometry::square(1), true, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, int out_h, int out_w) {
    in_h = static_cast<int>(x.dim(1));
    in_w = static_cast<int>(x.dim(2));
    Tensor<T> y = x;
    for (std::size_t i = 0; i < convs.size(); ++i) y = relus[i].forward(convs[i].forward(y));
    return bilinear_resize(cls.forward(y), out_h, out_w);
  }

  Tensor<T> backward(const Tensor<T>& g) {
    Tensor<T> gy = cls.backward(bilinear_resize_backward(g, in_h, in_w));
    for (std::size_t i = convs.size(); i-- > 0;) gy = convs[i].backward(relus[i].backward(gy));
    return gy;
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    for (auto& c : convs) {
      for (auto* p : c.params()) out.push_back(p);
    }
    for (auto* p : cls.params()) out.push_back(p);
    return out;
  }
};

template <typename T>
struct SegModel<T>::Impl {
  Conv2dLayer<T> stem;
  ChannelNorm<T> stem_norm;
  ReluLayer<T> stem_relu;
  std::vector<std::vector<Block<T>>> stages;
  SpatialProjector<T> phi;
  bool has_sconv = false;
  Head<T> decoder;
  Head<T> aux;
  bool has_aux = false;

  // Forward caches.
  int in_h = 0, in_w = 0;
  ProjectedSpatial<T> base;
  std::map<std::pair<int, int>, ProjectedSpatial<T>> resized;
  std::map<std::pair<int, int>, Tensor<T>> spatial_grads;
  Tensor<T> aux_grad_input;
  Mode mode = Mode::eval;
  bool forward_done = false;

  const ProjectedSpatial<T>& spatial_at(int h, int w) {
    if (h == base.height() && w == base.width()) return base;
    auto key = std::make_pair(h, w);
    auto it = resized.find(key);
    if (it == resized.end()) it = resized.emplace(key, resize_spatial(base, h, w)).first;
    return it->second;
  }

  Tensor<T> unit_forward(ConvUnit<T>& u, const Tensor<T>& x) {
    u.in_h = static_cast<int>(x.dim(1));
    u.in_w = static_cast<int>(x.dim(2));
    if (!u.is_sconv) return u.conv.forward(x);
    return u.sconv.forward(x, spatial_at(u.in_h, u.in_w));
  }

  Tensor<T> unit_backward(ConvUnit<T>& u, const Tensor<T>& g) {
    if (!u.is_sconv) return u.conv.backward(g);
    auto r = u.sconv.backward(g);
    auto key = std::make_pair(u.in_h, u.in_w);
    auto it = spatial_grads.find(key);
    if (it == spatial_grads.end()) {
      spatial_grads.emplace(key, std::move(r.spatial));
    } else {
      add_inplace(it->second, r.spatial);
    }
    return std::move(r.input);
  }

  Tensor<T> block_forward(Block<T>& b, const Tensor<T>& x, Mode m) {
    Tensor<T> y = b.relu[0].forward(b.norm[0].forward(unit_forward(b.unit[0], x), m));
    y = b.norm[1].forward(unit_forward(b.unit[1], y), m);
    if (b.has_proj) {
      add_inplace(y, b.proj_norm.forward(b.proj.forward(x), m));
    } else {
      add_inplace(y, x);
    }
    return b.out_relu.forward(y);
  }

  Tensor<T> block_backward(Block<T>& b, const Tensor<T>& g) {
    Tensor<T> gs = b.out_relu.backward(g);
    Tensor<T> gx = b.has_proj ? b.proj.backward(b.proj_norm.backward(gs)) : gs;
    Tensor<T> gy = unit_backward(b.unit[1], b.norm[1].backward(gs));
    gy = unit_backward(b.unit[0], b.norm[0].backward(b.relu[0].backward(gy)));
    add_inplace(gx, gy);
    return gx;
  }
};

template <typename T>
SegModel<T>::SegModel(const NetworkConfig& cfg) : cfg_(cfg), impl_(std::make_unique<Impl>()) {
  cfg_.validate();
  auto& m = *impl_;
  std::mt19937_64 rng(cfg_.seed);
  m.stem = Conv2dLayer<T>("stem.conv", 3, cfg_.widths[0], ConvGeometry::square(3, 2), false, rng);
  m.stem_norm = ChannelNorm<T>("stem.norm", cfg_.widths[0]);
  const int hidden = cfg_.f_hidden;
  int cin = cfg_.widths[0];
  m.stages.resize(cfg_.stages());
  for (int s = 0; s < cfg_.stages(); ++s) {
    const int c = cfg_.widths[s];
    for (int bi = 0; bi < cfg_.blocks; ++bi) {
      Block<T> b;
      const int stride = bi == 0 ? stage_stride(s) : 1;
      const std::string prefix = fmt::format("stage{}.block{}", s + 1, bi);
      for (int k = 0; k < 2; ++k) {
        auto& u = b.unit[k];
        u.name = fmt::format("{}.conv{}", prefix, k);
        const auto geom = ConvGeometry::square(3, k == 0 ? stride : 1);
        const int in = k == 0 ? cin : c;
        u.is_sconv = in_policy(cfg_, s, 2 * bi + k);
        if (u.is_sconv) {
          SConvOptions opt{in, c, geom, false, hidden};
          u.sconv = SConvState<T>(opt, rng);
          for (auto* p : u.sconv.params()) p->name = u.name + "." + p->name;
          m.has_sconv = true;
        } else {
          u.conv = Conv2dLayer<T>(u.name, in, c, geom, false, rng);
        }
        b.norm[k] = ChannelNorm<T>(fmt::format("{}.norm{}", prefix, k), c);
      }
      if (stride != 1 || cin != c) {
        b.has_proj = true;
        b.proj = Conv2dLayer<T>(prefix + ".proj", cin, c, ConvGeometry::square(1, stride, 0),
                                false, rng);
        b.proj_norm = ChannelNorm<T>(prefix + ".proj_norm", c);
      }
      m.stages[s].push_back(std::move(b));
      cin = c;
    }
  }
  if (m.has_sconv) m.phi = SpatialProjector<T>(cfg_.spatial_channels(), rng);
  m.decoder.build("decoder", cfg_.widths.back(), cfg_, rng);
  m.has_aux = cfg_.deep_supervision && cfg_.stages() >= 2;
  if (m.has_aux) m.aux.build("aux", cfg_.widths[cfg_.stages() - 2], cfg_, rng);
}

template <typename T>
SegModel<T>::~SegModel() = default;

template <typename T>
SegOutput<T> SegModel<T>::forward(const Tensor<T>& image, const Tensor<T>& spatial, Mode mode) {
  auto& m = *impl_;
  if (image.rank() != 3 || image.dim(0) != 3) {
    fail(ErrorKind::dimension, "image must be [3,h,w], got " + shape_str(image.shape()));
  }
  const int h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  if (spatial.rank() != 3 || spatial.dim(1) != image.dim(1) || spatial.dim(2) != image.dim(2)) {
    fail(ErrorKind::dimension, fmt::format("spatial {} does not match image {}",
                                           shape_str(spatial.shape()), shape_str(image.shape())));
  }
  if (m.has_sconv && static_cast<int>(spatial.dim(0)) != cfg_.spatial_channels()) {
    fail(ErrorKind::dimension, fmt::format("spatial has {} channels, source {} needs {}",
                                           spatial.dim(0), spatial_source_name(cfg_.source),
                                           cfg_.spatial_channels()));
  }
  check_finite(image, "image");
  m.in_h = h;
  m.in_w = w;
  m.mode = mode;
  m.resized.clear();
  m.spatial_grads.clear();
  if (m.has_sconv) {
    check_finite(spatial, "spatial input");
    const Tensor<T> s = cfg_.phi_stride == 1
                            ? spatial
                            : bilinear_resize(spatial, std::max(1, h / cfg_.phi_stride),
                                              std::max(1, w / cfg_.phi_stride));
    m.base = m.phi.forward(s, cfg_.source);
  }
  Tensor<T> x = m.stem_relu.forward(m.stem_norm.forward(m.stem.forward(image), mode));
  SegOutput<T> out;
  for (int s = 0; s < cfg_.stages(); ++s) {
    for (auto& b : m.stages[s]) x = m.block_forward(b, x, mode);
    if (m.has_aux && s == cfg_.stages() - 2) out.aux = m.aux.forward(x, h, w);
  }
  out.logits = m.decoder.forward(x, h, w);
  m.forward_done = true;
  return out;
}

template <typename T>
void SegModel<T>::backward(const Tensor<T>& grad_logits, const Tensor<T>* grad_aux) {
  auto& m = *impl_;
  if (!m.forward_done) fail(ErrorKind::state, "model backward without forward");
  m.spatial_grads.clear();
  Tensor<T> g = m.decoder.backward(grad_logits);
  for (int s = cfg_.stages() - 1; s >= 0; --s) {
    if (m.has_aux && grad_aux != nullptr && s == cfg_.stages() - 2) {
      add_inplace(g, m.aux.backward(*grad_aux));
    }
    for (auto it = m.stages[s].rbegin(); it != m.stages[s].rend(); ++it) {
      g = m.block_backward(*it, g);
    }
  }
  m.stem.backward(m.stem_norm.backward(m.stem_relu.backward(g)));
  if (m.has_sconv) {
    Tensor<T> gbase(m.base.s_prime.shape());
    for (auto& [key, gs] : m.spatial_grads) {
      if (key.first == m.base.height() && key.second == m.base.width()) {
        add_inplace(gbase, gs);
      } else {
        add_inplace(gbase, bilinear_resize_backward(gs, m.base.height(), m.base.width()));
      }
    }
    m.phi.backward(gbase);
  }
}

template <typename T>
std::vector<Param<T>*> SegModel<T>::params() {
  auto& m = *impl_;
  std::vector<Param<T>*> out;
  auto add = [&](const std::vector<Param<T>*>& ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  add(m.stem.params());
  add(m.stem_norm.params());
  for (auto& stage : m.stages) {
    for (auto& b : stage) {
      for (int k = 0; k < 2; ++k) {
        add(b.unit[k].is_sconv ? b.unit[k].sconv.params() : b.unit[k].conv.params());
        add(b.norm[k].params());
      }
      if (b.has_proj) {
        add(b.proj.params());
        add(b.proj_norm.params());
      }
    }
  }
  if (m.has_sconv) add(m.phi.params());
  add(m.decoder.params());
  if (m.has_aux) add(m.aux.params());
  return out;
}

template <typename T>
std::vector<Param<T>*> SegModel<T>::buffers() {
  auto& m = *impl_;
  std::vector<Param<T>*> out;
  auto add = [&](const std::vector<Param<T>*>& ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  add(m.stem_norm.buffers());
  for (auto& stage : m.stages) {
    for (auto& b : stage) {
      add(b.norm[0].buffers());
      add(b.norm[1].buffers());
      if (b.has_proj) add(b.proj_norm.buffers());
    }
  }
  return out;
}

template <typename T>
std::vector<Param<T>*> SegModel<T>::state() {
  auto out = params();
  auto buf = buffers();
  out.insert(out.end(), buf.begin(), buf.end());
  return out;
}

template <typename T>
Param<T>* SegModel<T>::find(const std::string& name) {
  for (auto* p : state()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

template <typename T>
void SegModel<T>::zero_grad() {
  for (auto* p : params()) p->zero_grad();
}

template <typename T>
int SegModel<T>::copy_state_from(SegModel& other) {
  int n = 0;
  for (auto* src : other.state()) {
    auto* dst = find(src->name);
    if (dst != nullptr && dst->value.shape() == src->value.shape()) {
      dst->value = src->value;
      ++n;
    }
  }
  return n;
}

template <typename T>
ParamBreakdown SegModel<T>::count_params() {
  auto& m = *impl_;
  ParamBreakdown pb;
  auto sum = [](const std::vector<Param<T>*>& ps) {
    std::size_t n = 0;
    for (auto* p : ps) n += p->numel();
    return n;
  };
  pb.backbone += sum(m.stem.params()) + sum(m.stem_norm.params());
  for (auto& stage : m.stages) {
    for (auto& b : stage) {
      for (int k = 0; k < 2; ++k) {
        if (b.unit[k].is_sconv) {
          pb.backbone += sum(b.unit[k].sconv.host_params());
          pb.sconv_extra += sum(b.unit[k].sconv.guidance_params());
        } else {
          pb.backbone += sum(b.unit[k].conv.params());
        }
        pb.backbone += sum(b.norm[k].params());
      }
      if (b.has_proj) pb.backbone += sum(b.proj.params()) + sum(b.proj_norm.params());
    }
  }
  if (m.has_sconv) pb.sconv_extra += sum(m.phi.params());
  pb.decoder += sum(m.decoder.params());
  if (m.has_aux) pb.decoder += sum(m.aux.params());
  pb.total = sum(params());
  return pb;
}

template <typename T>
int SegModel<T>::sconv_count() const {
  int n = 0;
  for (const auto& stage : impl_->stages) {
    for (const auto& b : stage) n += b.unit[0].is_sconv + b.unit[1].is_sconv;
  }
  return n;
}

template <typename T>
std::vector<typename SegModel<T>::SConvLayerRef> SegModel<T>::sconv_layers() {
  std::vector<SConvLayerRef> out;
  for (std::size_t s = 0; s < impl_->stages.size(); ++s) {
    for (std::size_t bi = 0; bi < impl_->stages[s].size(); ++bi) {
      for (int k = 0; k < 2; ++k) {
        auto& u = impl_->stages[s][bi].unit[k];
        if (u.is_sconv) {
          out.push_back({u.name, static_cast<int>(s) + 1, static_cast<int>(bi), k, &u.sconv});
        }
      }
    }
  }
  return out;
}

template <typename T>
void SegModel<T>::set_degenerate(bool on) {
  for (auto& ref : sconv_layers()) {
    ref.layer->freeze_offsets_zero = on;
    ref.layer->freeze_mask_one = on;
  }
}

template <typename T>
std::vector<ReceptiveFieldMap<T>> receptive_field_map(SegModel<T>& model, const Tensor<T>& image,
                                                      const Tensor<T>& spatial) {
  std::vector<ReceptiveFieldMap<T>> out;
  if (model.sconv_count() == 0) return out;
  model.forward(image, spatial, Mode::eval);
  for (auto& ref : model.sconv_layers()) {
    const auto& d = ref.layer->last_offsets().delta_d;
    const std::size_t k = d.dim(0), h = d.dim(1), w = d.dim(2), plane = h * w;
    Tensor<T> map({1, h, w});
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t p = 0; p < plane; ++p) {
        const T dy = d[(i * plane + p) * 2], dx = d[(i * plane + p) * 2 + 1];
        map[p] += std::sqrt(dy * dy + dx * dx);
      }
    }
    const auto [lo, hi] = std::minmax_element(map.values().begin(), map.values().end());
    const T mn = *lo, mx = *hi;
    for (auto& v : map.values()) v = mx > mn ? (v - mn) / (mx - mn) * T(255) : T(0);
    out.push_back({ref.name, ref.stage, ref.block, ref.conv, std::move(map)});
  }
  return out;
}

template class SegModel<float>;
template class SegModel<double>;
template std::vector<ReceptiveFieldMap<float>> receptive_field_map(SegModel<float>&,
                                                                   const Tensor<float>&,
                                                                   const Tensor<float>&);
template std::vector<ReceptiveFieldMap<double>> receptive_field_map(SegModel<double>&,
                                                                    const Tensor<double>&,
                                                                    const Tensor<double>&);

}  // namespace sconv

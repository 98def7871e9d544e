#include "sconv/sconv_op.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>
#include <fmt/format.h>

namespace sconv {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string_view spatial_source_name(SpatialSource s) {
  switch (s) {
    case SpatialSource::depth: return "depth";
    case SpatialSource::hha: return "hha";
    case SpatialSource::coords: return "coords";
    case SpatialSource::rgb_feature: return "rgb_feature";
  }
  return "depth";
}

SpatialSource parse_spatial_source(std::string_view name) {
  if (name == "depth") return SpatialSource::depth;
  if (name == "hha") return SpatialSource::hha;
  if (name == "coords") return SpatialSource::coords;
  if (name == "rgb_feature" || name == "rgb") return SpatialSource::rgb_feature;
  fail(ErrorKind::config, fmt::format("unknown spatial source '{}'", name));
}

int spatial_source_channels(SpatialSource s) {
  switch (s) {
    case SpatialSource::depth: return 1;
    case SpatialSource::hha:
    case SpatialSource::coords:
    case SpatialSource::rgb_feature: return 3;
  }
  return 1;
}

std::size_t host_conv_param_count(int c_in, int c_out, const ConvGeometry& g,
                                  bool bias) {
  return static_cast<std::size_t>(c_out) * c_in * g.taps() + (bias ? c_out : 0);
}

std::size_t offset_generator_param_count(const ConvGeometry& g) {
  const std::size_t k = g.taps();
  return 2 * k * kProjectedChannels * k + 2 * k;
}

std::size_t weight_generator_param_count(int taps, int hidden) {
  const std::size_t in = static_cast<std::size_t>(kProjectedChannels) * taps;
  return in * hidden + hidden + static_cast<std::size_t>(hidden) * taps + taps;
}

std::size_t projector_param_count(int in_channels) {
  const std::size_t c = kProjectedChannels;
  return (in_channels * c * 9 + c) + 2 * (c * c * 9 + c);
}

namespace {

template <typename T>
inline T tap_value(const T* plane, const SampleTap<T>& t) {
  const T hy = T(1) - t.ly, hx = T(1) - t.lx;
  const T v00 = t.idx[0] >= 0 ? plane[t.idx[0]] : T(0);
  const T v01 = t.idx[1] >= 0 ? plane[t.idx[1]] : T(0);
  const T v10 = t.idx[2] >= 0 ? plane[t.idx[2]] : T(0);
  const T v11 = t.idx[3] >= 0 ? plane[t.idx[3]] : T(0);
  return hy * hx * v00 + hy * t.lx * v01 + t.ly * hx * v10 + t.ly * t.lx * v11;
}

template <typename T>
inline void tap_scatter(T* plane, const SampleTap<T>& t, T g) {
  const T hy = T(1) - t.ly, hx = T(1) - t.lx;
  if (t.idx[0] >= 0) plane[t.idx[0]] += hy * hx * g;
  if (t.idx[1] >= 0) plane[t.idx[1]] += hy * t.lx * g;
  if (t.idx[2] >= 0) plane[t.idx[2]] += t.ly * hx * g;
  if (t.idx[3] >= 0) plane[t.idx[3]] += t.ly * t.lx * g;
}

// Accumulates g * d(value)/dy and g * d(value)/dx.
template <typename T>
inline void tap_coord_grad(const T* plane, const SampleTap<T>& t, T g, T& d_y,
                           T& d_x) {
  const T v00 = t.idx[0] >= 0 ? plane[t.idx[0]] : T(0);
  const T v01 = t.idx[1] >= 0 ? plane[t.idx[1]] : T(0);
  const T v10 = t.idx[2] >= 0 ? plane[t.idx[2]] : T(0);
  const T v11 = t.idx[3] >= 0 ? plane[t.idx[3]] : T(0);
  d_y += g * ((T(1) - t.lx) * (v10 - v00) + t.lx * (v11 - v01));
  d_x += g * ((T(1) - t.ly) * (v01 - v00) + t.ly * (v11 - v10));
}

template <typename T>
SampleTap<T> make_tap(T y, T x, int h, int w) {
  const T fy = std::floor(y), fx = std::floor(x);
  const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
  const int y1 = y0 + 1, x1 = x0 + 1;
  const bool r0 = y0 >= 0 && y0 < h, r1 = y1 >= 0 && y1 < h;
  const bool c0 = x0 >= 0 && x0 < w, c1 = x1 >= 0 && x1 < w;
  SampleTap<T> t;
  t.idx = {r0 && c0 ? y0 * w + x0 : -1, r0 && c1 ? y0 * w + x1 : -1,
           r1 && c0 ? y1 * w + x0 : -1, r1 && c1 ? y1 * w + x1 : -1};
  t.ly = y - fy;
  t.lx = x - fx;
  return t;
}

// Sampling positions p_src + d_i + delta_i(p) for every tap i and output
// position p, from raw offsets laid out [2K, P] with (dy, dx) per tap. A
// null `raw` means zero offsets.
template <typename T>
std::vector<SampleTap<T>> build_taps(const ConvGeometry& g, int h, int w,
                                     int oh, int ow, const T* raw) {
  const int k = g.taps(), p_count = oh * ow;
  std::vector<SampleTap<T>> taps(static_cast<std::size_t>(k) * p_count);
  for (int i = 0; i < k; ++i) {
    const int ki = i / g.kernel_w, kj = i % g.kernel_w;
    const T* dy = raw ? raw + static_cast<std::size_t>(2 * i) * p_count : nullptr;
    const T* dx = raw ? raw + static_cast<std::size_t>(2 * i + 1) * p_count : nullptr;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const int p = oy * ow + ox;
        T y = static_cast<T>(oy * g.stride - g.padding + ki * g.dilation);
        T x = static_cast<T>(ox * g.stride - g.padding + kj * g.dilation);
        if (raw) {
          y += dy[p];
          x += dx[p];
        }
        taps[static_cast<std::size_t>(i) * p_count + p] = make_tap(y, x, h, w);
      }
    }
  }
  return taps;
}

// s_star[p, i*C + c] for C-channel map.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& map, const std::vector<SampleTap<T>>& taps,
                      int k, int oh, int ow) {
  const int c_count = static_cast<int>(map.dim(0));
  const std::size_t plane = map.dim(1) * map.dim(2);
  const int p_count = oh * ow;
  const std::size_t row = static_cast<std::size_t>(k) * c_count;
  Tensor<T> out({static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), row});
  for (int i = 0; i < k; ++i) {
    for (int p = 0; p < p_count; ++p) {
      const auto& t = taps[static_cast<std::size_t>(i) * p_count + p];
      T* dst = out.data() + p * row + static_cast<std::size_t>(i) * c_count;
      for (int c = 0; c < c_count; ++c) dst[c] = tap_value(map.data() + c * plane, t);
    }
  }
  return out;
}

template <typename T>
void mask_forward(const Tensor<T>& s_star, const Tensor<T>& f0w, const Tensor<T>& f0b,
                  const Tensor<T>& f1w, const Tensor<T>& f1b, int k,
                  Tensor<T>& hidden_pre, Tensor<T>& hidden_act, Tensor<T>& mask) {
  const auto p = static_cast<Eigen::Index>(s_star.dim(0) * s_star.dim(1));
  const auto in = static_cast<Eigen::Index>(s_star.dim(2));
  const auto hid = static_cast<Eigen::Index>(f0w.dim(0));
  if (f0w.rank() != 2 || static_cast<Eigen::Index>(f0w.dim(1)) != in ||
      f0b.numel() != f0w.dim(0) || f1w.rank() != 2 ||
      static_cast<Eigen::Index>(f1w.dim(1)) != hid ||
      f1w.dim(0) != static_cast<std::size_t>(k) || f1b.numel() != f1w.dim(0)) {
    fail(ErrorKind::dimension,
         fmt::format("weight generator: gathered {} incompatible with f.0 {} / f.1 {}",
                     shape_str(s_star.shape()), shape_str(f0w.shape()),
                     shape_str(f1w.shape())));
  }
  hidden_pre = Tensor<T>({static_cast<std::size_t>(p), static_cast<std::size_t>(hid)});
  hidden_act = Tensor<T>(hidden_pre.shape());
  Eigen::Map<const RowMat<T>> g(s_star.data(), p, in);
  Eigen::Map<const RowMat<T>> w0(f0w.data(), hid, in);
  Eigen::Map<RowMat<T>> hp(hidden_pre.data(), p, hid);
  hp.noalias() = g * w0.transpose();
  for (Eigen::Index r = 0; r < p; ++r) {
    for (Eigen::Index j = 0; j < hid; ++j) {
      T& v = hp(r, j);
      v += f0b[j];
      hidden_act[r * hid + j] = v > T(0) ? v : T(0);
    }
  }
  Eigen::Map<const RowMat<T>> ha(hidden_act.data(), p, hid);
  Eigen::Map<const RowMat<T>> w1(f1w.data(), k, hid);
  RowMat<T> logits = ha * w1.transpose();
  const std::size_t ph = s_star.dim(0), pw = s_star.dim(1);
  mask = Tensor<T>({static_cast<std::size_t>(k), ph, pw});
  for (int i = 0; i < k; ++i) {
    for (Eigen::Index r = 0; r < p; ++r) {
      mask[i * p + r] = sigmoid(logits(r, i) + f1b[i]);
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// SpatialProjector
// ---------------------------------------------------------------------------

template <typename T>
SpatialProjector<T>::SpatialProjector(int in_channels, std::mt19937_64& rng)
    : in_channels_(in_channels) {
  if (in_channels < 1) fail(ErrorKind::config, "spatial projector needs >= 1 input channel");
  const std::size_t c = kProjectedChannels;
  for (int l = 0; l < 3; ++l) {
    const std::size_t cin = l == 0 ? static_cast<std::size_t>(in_channels) : c;
    weight_[l] = Param<T>(fmt::format("phi.{}.w", l), {c, cin, 3, 3});
    bias_[l] = Param<T>(fmt::format("phi.{}.b", l), {c});
    he_uniform(weight_[l].value, cin * 9, rng);
  }
}

template <typename T>
ProjectedSpatial<T> SpatialProjector<T>::forward(const Tensor<T>& spatial,
                                                 SpatialSource kind) {
  if (spatial.rank() != 3 || spatial.dim(0) != static_cast<std::size_t>(in_channels_)) {
    fail(ErrorKind::dimension,
         fmt::format("spatial projector expects [{},h,w], got {}", in_channels_,
                     shape_str(spatial.shape())));
  }
  check_finite(spatial, "spatial input");
  const auto g = ConvGeometry::square(3);
  Tensor<T> x = spatial;
  for (int l = 0; l < 3; ++l) {
    pre_act_[l] = conv2d_forward(x, weight_[l].value, &bias_[l].value, g, &conv_cache_[l]);
    x = activation_forward(Activation::relu, pre_act_[l]);
  }
  return {std::move(x), kind};
}

template <typename T>
Tensor<T> SpatialProjector<T>::backward(const Tensor<T>& grad_projected) {
  if (!conv_cache_[2].valid) fail(ErrorKind::state, "spatial projector: missing forward cache");
  Tensor<T> g = grad_projected;
  for (int l = 2; l >= 0; --l) {
    g = activation_backward(Activation::relu, pre_act_[l], pre_act_[l], g);
    auto gp = conv2d_backward(conv_cache_[l], g);
    const auto& gw = gp.grad("weight");
    const auto& gb = gp.grad("bias");
    for (std::size_t i = 0; i < gw.numel(); ++i) weight_[l].grad[i] += gw[i];
    for (std::size_t i = 0; i < gb.numel(); ++i) bias_[l].grad[i] += gb[i];
    g = gp.grad("input");
  }
  return g;
}

template <typename T>
std::vector<Param<T>*> SpatialProjector<T>::params() {
  return {&weight_[0], &bias_[0], &weight_[1], &bias_[1], &weight_[2], &bias_[2]};
}

template <typename T>
std::size_t SpatialProjector<T>::param_count() const {
  std::size_t n = 0;
  for (int l = 0; l < 3; ++l) n += weight_[l].numel() + bias_[l].numel();
  return n;
}

template <typename T>
ProjectedSpatial<T> resize_spatial(const ProjectedSpatial<T>& sp, int h, int w) {
  if (sp.height() == h && sp.width() == w) return sp;
  return {bilinear_resize(sp.s_prime, h, w), sp.source_kind};
}

// ---------------------------------------------------------------------------
// SConvState
// ---------------------------------------------------------------------------

template <typename T>
SConvState<T>::SConvState(const SConvOptions& opt, std::mt19937_64& rng) : opt_(opt) {
  if (opt.in_channels < 1 || opt.out_channels < 1) {
    fail(ErrorKind::config, "S-Conv needs positive channel counts");
  }
  const std::size_t k = opt.geom.taps();
  const std::size_t cin = opt.in_channels, cout = opt.out_channels;
  const std::size_t kh = opt.geom.kernel_h, kw = opt.geom.kernel_w;
  const std::size_t c = kProjectedChannels;
  hidden_ = opt.f_hidden > 0 ? opt.f_hidden : static_cast<int>(c * k);
  const std::size_t hid = hidden_;

  w_ = Param<T>("w", {cout, cin, kh, kw});
  he_uniform(w_.value, cin * k, rng);
  if (opt.bias) b_ = Param<T>("b", {cout});
  eta_w_ = Param<T>("eta.w", {2 * k, c, kh, kw});
  eta_b_ = Param<T>("eta.b", {2 * k});
  f0_w_ = Param<T>("f.0.w", {hid, c * k});
  f0_b_ = Param<T>("f.0.b", {hid});
  he_uniform(f0_w_.value, c * k, rng);
  f1_w_ = Param<T>("f.1.w", {k, hid});
  f1_b_ = Param<T>("f.1.b", {k});
}

template <typename T>
std::vector<Param<T>*> SConvState<T>::params() {
  auto p = host_params();
  for (auto* q : guidance_params()) p.push_back(q);
  return p;
}

template <typename T>
std::vector<Param<T>*> SConvState<T>::host_params() {
  if (opt_.bias) return {&w_, &b_};
  return {&w_};
}

template <typename T>
std::vector<Param<T>*> SConvState<T>::guidance_params() {
  return {&eta_w_, &eta_b_, &f0_w_, &f0_b_, &f1_w_, &f1_b_};
}

template <typename T>
std::size_t SConvState<T>::host_param_count() const {
  return w_.numel() + (opt_.bias ? b_.numel() : 0);
}

template <typename T>
std::size_t SConvState<T>::guidance_param_count() const {
  return eta_w_.numel() + eta_b_.numel() + f0_w_.numel() + f0_b_.numel() +
         f1_w_.numel() + f1_b_.numel();
}

template <typename T>
std::size_t SConvState<T>::param_count() const {
  return host_param_count() + guidance_param_count();
}

template <typename T>
Tensor<T> SConvState<T>::forward(const Tensor<T>& input, const ProjectedSpatial<T>& sp) {
  const auto& g = opt_.geom;
  if (input.rank() != 3 || input.dim(0) != static_cast<std::size_t>(opt_.in_channels)) {
    fail(ErrorKind::dimension,
         fmt::format("S-Conv expects input [{},h,w], got {}", opt_.in_channels,
                     shape_str(input.shape())));
  }
  const int h = static_cast<int>(input.dim(1)), w = static_cast<int>(input.dim(2));
  if (sp.s_prime.rank() != 3 ||
      sp.s_prime.dim(0) != static_cast<std::size_t>(kProjectedChannels) ||
      sp.height() != h || sp.width() != w) {
    fail(ErrorKind::dimension,
         fmt::format("S-Conv: projected spatial {} does not match input {}",
                     shape_str(sp.s_prime.shape()), shape_str(input.shape())));
  }
  check_finite(input, "S-Conv input");
  const int oh = g.out_h(h), ow = g.out_w(w);
  if (oh < 1 || ow < 1) fail(ErrorKind::dimension, "S-Conv: input too small for kernel");
  const int k = g.taps(), p_count = oh * ow;
  out_h_ = oh;
  out_w_ = ow;
  input_ = input;
  s_prime_ = sp.s_prime;

  // Offsets.
  Tensor<T> raw;
  if (freeze_offsets_zero) {
    raw = Tensor<T>({static_cast<std::size_t>(2 * k), static_cast<std::size_t>(oh),
                     static_cast<std::size_t>(ow)});
    eta_cache_.valid = false;
  } else {
    raw = conv2d_forward(sp.s_prime, eta_w_.value, &eta_b_.value, g, &eta_cache_);
  }
  offsets_.delta_d = Tensor<T>({static_cast<std::size_t>(k), static_cast<std::size_t>(oh),
                                static_cast<std::size_t>(ow), 2});
  for (int i = 0; i < k; ++i) {
    for (int p = 0; p < p_count; ++p) {
      offsets_.delta_d[(static_cast<std::size_t>(i) * p_count + p) * 2] = raw[(2 * i) * p_count + p];
      offsets_.delta_d[(static_cast<std::size_t>(i) * p_count + p) * 2 + 1] =
          raw[(2 * i + 1) * p_count + p];
    }
  }
  taps_ = build_taps<T>(g, h, w, oh, ow, freeze_offsets_zero ? nullptr : raw.data());

  // Modulation.
  if (freeze_mask_one) {
    mask_.m = Tensor<T>({static_cast<std::size_t>(k), static_cast<std::size_t>(oh),
                         static_cast<std::size_t>(ow)},
                        T(1));
    gathered_.s_star = Tensor<T>();
  } else {
    gathered_.s_star = gather_rows(sp.s_prime, taps_, k, oh, ow);
    mask_forward(gathered_.s_star, f0_w_.value, f0_b_.value, f1_w_.value, f1_b_.value, k,
                 hidden_pre_, hidden_act_, mask_.m);
  }

  // Modulated deformable columns.
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  cols_ = Tensor<T>({static_cast<std::size_t>(opt_.in_channels) * k,
                     static_cast<std::size_t>(p_count)});
  for (int c = 0; c < opt_.in_channels; ++c) {
    const T* xp = input.data() + c * plane;
    for (int i = 0; i < k; ++i) {
      T* dst = cols_.data() + (static_cast<std::size_t>(c) * k + i) * p_count;
      const T* m = mask_.m.data() + static_cast<std::size_t>(i) * p_count;
      const SampleTap<T>* t = taps_.data() + static_cast<std::size_t>(i) * p_count;
      for (int p = 0; p < p_count; ++p) dst[p] = m[p] * tap_value(xp, t[p]);
    }
  }
  cached_ = true;
  return gemm_columns(w_.value, cols_, opt_.bias ? &b_.value : nullptr, oh, ow);
}

template <typename T>
typename SConvState<T>::Backward SConvState<T>::backward(const Tensor<T>& grad_output) {
  if (!cached_) fail(ErrorKind::state, "S-Conv backward: missing forward cache");
  const auto& g = opt_.geom;
  const int k = g.taps(), p_count = out_h_ * out_w_;
  check_shape(grad_output,
              {static_cast<std::size_t>(opt_.out_channels), static_cast<std::size_t>(out_h_),
               static_cast<std::size_t>(out_w_)},
              "S-Conv grad_output");
  const int h = static_cast<int>(input_.dim(1)), w = static_cast<int>(input_.dim(2));
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  Tensor<T> gw, gb, gcols;
  gemm_columns_backward(w_.value, cols_, grad_output, &gw, opt_.bias ? &gb : nullptr, &gcols);
  for (std::size_t i = 0; i < gw.numel(); ++i) w_.grad[i] += gw[i];
  if (opt_.bias) {
    for (std::size_t i = 0; i < gb.numel(); ++i) b_.grad[i] += gb[i];
  }

  Backward out;
  out.input = Tensor<T>(input_.shape());
  out.spatial = Tensor<T>(s_prime_.shape());
  Tensor<T> grad_mask({static_cast<std::size_t>(k), static_cast<std::size_t>(p_count)});
  Tensor<T> grad_raw({static_cast<std::size_t>(2 * k), static_cast<std::size_t>(out_h_),
                      static_cast<std::size_t>(out_w_)});
  const bool want_coords = !freeze_offsets_zero;
  const bool want_mask = !freeze_mask_one;

  for (int c = 0; c < opt_.in_channels; ++c) {
    const T* xp = input_.data() + c * plane;
    T* gxp = out.input.data() + c * plane;
    for (int i = 0; i < k; ++i) {
      const T* gc = gcols.data() + (static_cast<std::size_t>(c) * k + i) * p_count;
      const T* m = mask_.m.data() + static_cast<std::size_t>(i) * p_count;
      const SampleTap<T>* t = taps_.data() + static_cast<std::size_t>(i) * p_count;
      T* gm = grad_mask.data() + static_cast<std::size_t>(i) * p_count;
      T* gdy = grad_raw.data() + static_cast<std::size_t>(2 * i) * p_count;
      T* gdx = grad_raw.data() + static_cast<std::size_t>(2 * i + 1) * p_count;
      for (int p = 0; p < p_count; ++p) {
        const T gv = gc[p] * m[p];
        tap_scatter(gxp, t[p], gv);
        if (want_mask) gm[p] += gc[p] * tap_value(xp, t[p]);
        if (want_coords) tap_coord_grad(xp, t[p], gv, gdy[p], gdx[p]);
      }
    }
  }

  if (want_mask) {
    // d(logit) = d(mask) * m (1 - m), logits laid out [P, K].
    const auto pe = static_cast<Eigen::Index>(p_count);
    const auto hid = static_cast<Eigen::Index>(hidden_);
    const auto in = static_cast<Eigen::Index>(gathered_.s_star.dim(2));
    RowMat<T> glog(pe, k);
    for (int i = 0; i < k; ++i) {
      for (int p = 0; p < p_count; ++p) {
        const T m = mask_.m[i * p_count + p];
        glog(p, i) = grad_mask[i * p_count + p] * m * (T(1) - m);
      }
    }
    Eigen::Map<const RowMat<T>> ha(hidden_act_.data(), pe, hid);
    Eigen::Map<RowMat<T>> gf1(f1_w_.grad.data(), k, hid);
    gf1.noalias() += glog.transpose() * ha;
    for (int i = 0; i < k; ++i) f1_b_.grad[i] += glog.col(i).sum();
    Eigen::Map<const RowMat<T>> w1(f1_w_.value.data(), k, hid);
    RowMat<T> gh = glog * w1;
    for (Eigen::Index r = 0; r < pe; ++r) {
      for (Eigen::Index j = 0; j < hid; ++j) {
        if (!(hidden_pre_[r * hid + j] > T(0))) gh(r, j) = T(0);
      }
    }
    Eigen::Map<const RowMat<T>> gs(gathered_.s_star.data(), pe, in);
    Eigen::Map<RowMat<T>> gf0(f0_w_.grad.data(), hid, in);
    gf0.noalias() += gh.transpose() * gs;
    for (Eigen::Index j = 0; j < hid; ++j) f0_b_.grad[j] += gh.col(j).sum();
    Eigen::Map<const RowMat<T>> w0(f0_w_.value.data(), hid, in);
    RowMat<T> g_star = gh * w0;

    // Gathering backward: value path into S' and coordinate path into offsets.
    const int c_count = static_cast<int>(s_prime_.dim(0));
    const std::size_t splane = s_prime_.dim(1) * s_prime_.dim(2);
    for (int i = 0; i < k; ++i) {
      const SampleTap<T>* t = taps_.data() + static_cast<std::size_t>(i) * p_count;
      T* gdy = grad_raw.data() + static_cast<std::size_t>(2 * i) * p_count;
      T* gdx = grad_raw.data() + static_cast<std::size_t>(2 * i + 1) * p_count;
      for (int p = 0; p < p_count; ++p) {
        const T* gsrow = g_star.data() + static_cast<std::size_t>(p) * in +
                         static_cast<std::size_t>(i) * c_count;
        T dy = 0, dx = 0;
        for (int c = 0; c < c_count; ++c) {
          tap_scatter(out.spatial.data() + c * splane, t[p], gsrow[c]);
          if (want_coords) tap_coord_grad(s_prime_.data() + c * splane, t[p], gsrow[c], dy, dx);
        }
        gdy[p] += dy;
        gdx[p] += dx;
      }
    }
  }

  if (want_coords) {
    auto ge = conv2d_backward(eta_cache_, grad_raw);
    const auto& gew = ge.grad("weight");
    const auto& geb = ge.grad("bias");
    const auto& gin = ge.grad("input");
    for (std::size_t i = 0; i < gew.numel(); ++i) eta_w_.grad[i] += gew[i];
    for (std::size_t i = 0; i < geb.numel(); ++i) eta_b_.grad[i] += geb[i];
    for (std::size_t i = 0; i < gin.numel(); ++i) out.spatial[i] += gin[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Free functions
// ---------------------------------------------------------------------------

template <typename T>
ProjectedSpatial<T> spatial_project(const Tensor<T>& spatial, SpatialProjector<T>& phi,
                                    SpatialSource kind) {
  return phi.forward(spatial, kind);
}

template <typename T>
OffsetField<T> generate_offsets(const ProjectedSpatial<T>& sp, const Tensor<T>& eta_weight,
                                const Tensor<T>& eta_bias, const ConvGeometry& geom) {
  const std::size_t k = geom.taps();
  if (eta_weight.rank() != 4 || eta_weight.dim(0) != 2 * k ||
      eta_weight.dim(1) != static_cast<std::size_t>(kProjectedChannels)) {
    fail(ErrorKind::dimension,
         fmt::format("offset generator weight {} does not produce 2K={} channels",
                     shape_str(eta_weight.shape()), 2 * k));
  }
  auto raw = conv2d_forward(sp.s_prime, eta_weight, &eta_bias, geom);
  const std::size_t oh = raw.dim(1), ow = raw.dim(2), p_count = oh * ow;
  OffsetField<T> off;
  off.delta_d = Tensor<T>({k, oh, ow, 2});
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t p = 0; p < p_count; ++p) {
      off.delta_d[(i * p_count + p) * 2] = raw[(2 * i) * p_count + p];
      off.delta_d[(i * p_count + p) * 2 + 1] = raw[(2 * i + 1) * p_count + p];
    }
  }
  return off;
}

template <typename T>
GatheredSpatial<T> gather_spatial(const ProjectedSpatial<T>& sp, const ConvGeometry& geom,
                                  const OffsetField<T>& offsets) {
  const int h = sp.height(), w = sp.width();
  const int oh = geom.out_h(h), ow = geom.out_w(w), k = geom.taps();
  check_shape(offsets.delta_d,
              {static_cast<std::size_t>(k), static_cast<std::size_t>(oh),
               static_cast<std::size_t>(ow), 2},
              "gather_spatial offsets");
  const int p_count = oh * ow;
  std::vector<T> raw(static_cast<std::size_t>(2 * k) * p_count);
  for (int i = 0; i < k; ++i) {
    for (int p = 0; p < p_count; ++p) {
      raw[(2 * i) * p_count + p] = offsets.delta_d[(i * p_count + p) * 2];
      raw[(2 * i + 1) * p_count + p] = offsets.delta_d[(i * p_count + p) * 2 + 1];
    }
  }
  auto taps = build_taps<T>(geom, h, w, oh, ow, raw.data());
  return {gather_rows(sp.s_prime, taps, k, oh, ow)};
}

template <typename T>
ModulationField<T> generate_weight_mask(const GatheredSpatial<T>& gathered,
                                        const Tensor<T>& f0_weight, const Tensor<T>& f0_bias,
                                        const Tensor<T>& f1_weight, const Tensor<T>& f1_bias) {
  if (gathered.s_star.rank() != 3 ||
      gathered.s_star.dim(2) % static_cast<std::size_t>(kProjectedChannels) != 0) {
    fail(ErrorKind::dimension, "weight generator: gathered vector length must be 64K");
  }
  const int k = static_cast<int>(gathered.s_star.dim(2) / kProjectedChannels);
  Tensor<T> hp, ha;
  ModulationField<T> out;
  mask_forward(gathered.s_star, f0_weight, f0_bias, f1_weight, f1_bias, k, hp, ha, out.m);
  return out;
}

template <typename T>
Tensor<T> sconv_forward(const Tensor<T>& input, SConvState<T>& state,
                        const ProjectedSpatial<T>& sp) {
  return state.forward(input, sp);
}

template <typename T>
GradPair<T> sconv_backward(SConvState<T>& state, const Tensor<T>& grad_output) {
  for (auto* p : state.params()) p->zero_grad();
  auto b = state.backward(grad_output);
  GradPair<T> out;
  out.grads.emplace("input", std::move(b.input));
  out.grads.emplace("spatial", std::move(b.spatial));
  for (auto* p : state.params()) out.grads.emplace(p->name, p->grad);
  return out;
}

template <typename T>
std::size_t param_count(const SConvState<T>& state) {
  return state.param_count();
}

#define SCONV_INSTANTIATE(T)                                                              \
  template class SpatialProjector<T>;                                                     \
  template class SConvState<T>;                                                           \
  template ProjectedSpatial<T> resize_spatial<T>(const ProjectedSpatial<T>&, int, int);   \
  template ProjectedSpatial<T> spatial_project<T>(const Tensor<T>&, SpatialProjector<T>&, \
                                                  SpatialSource);                         \
  template OffsetField<T> generate_offsets<T>(const ProjectedSpatial<T>&,                 \
                                              const Tensor<T>&, const Tensor<T>&,         \
                                              const ConvGeometry&);                       \
  template GatheredSpatial<T> gather_spatial<T>(const ProjectedSpatial<T>&,               \
                                                const ConvGeometry&,                      \
                                                const OffsetField<T>&);                   \
  template ModulationField<T> generate_weight_mask<T>(                                    \
      const GatheredSpatial<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
      const Tensor<T>&);                                                                  \
  template Tensor<T> sconv_forward<T>(const Tensor<T>&, SConvState<T>&,                   \
                                      const ProjectedSpatial<T>&);                        \
  template GradPair<T> sconv_backward<T>(SConvState<T>&, const Tensor<T>&);               \
  template std::size_t param_count<T>(const SConvState<T>&);

SCONV_INSTANTIATE(float)
SCONV_INSTANTIATE(double)
#undef SCONV_INSTANTIATE

}  // namespace sconv

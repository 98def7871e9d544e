#include "sconv/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>
#include <fmt/format.h>

namespace sconv {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::vector<std::array<int, 2>> ConvGeometry::kernel_grid() const {
  std::vector<std::array<int, 2>> d;
  d.reserve(taps());
  for (int i = 0; i < kernel_h; ++i) {
    for (int j = 0; j < kernel_w; ++j) {
      d.push_back({i - (kernel_h - 1) / 2, j - (kernel_w - 1) / 2});
    }
  }
  return d;
}

template <typename T>
const Tensor<T>& GradPair<T>::grad(const std::string& name) const {
  auto it = grads.find(name);
  if (it == grads.end()) fail(ErrorKind::state, "no gradient named '" + name + "'");
  return it->second;
}

namespace {

void check_geometry(const ConvGeometry& g, int h, int w, const char* what) {
  if (g.kernel_h < 1 || g.kernel_w < 1 || g.stride < 1 || g.dilation < 1 ||
      g.padding < 0) {
    fail(ErrorKind::dimension, fmt::format("{}: invalid convolution geometry", what));
  }
  if (g.out_h(h) < 1 || g.out_w(w) < 1) {
    fail(ErrorKind::dimension,
         fmt::format("{}: input {}x{} too small for kernel {}x{}", what, h, w,
                     g.kernel_h, g.kernel_w));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> im2col(const Tensor<T>& input, const ConvGeometry& g) {
  if (input.rank() != 3) fail(ErrorKind::dimension, "im2col: input must be [C,h,w]");
  const int c_in = static_cast<int>(input.dim(0));
  const int h = static_cast<int>(input.dim(1));
  const int w = static_cast<int>(input.dim(2));
  check_geometry(g, h, w, "im2col");
  const int oh = g.out_h(h), ow = g.out_w(w), k = g.taps();
  Tensor<T> cols({static_cast<std::size_t>(c_in * k),
                  static_cast<std::size_t>(oh * ow)});
  T* out = cols.data();
  for (int c = 0; c < c_in; ++c) {
    const T* plane = input.data() + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < g.kernel_h; ++ki) {
      for (int kj = 0; kj < g.kernel_w; ++kj) {
        for (int oy = 0; oy < oh; ++oy) {
          const int y = oy * g.stride - g.padding + ki * g.dilation;
          if (y < 0 || y >= h) {
            std::fill(out, out + ow, T(0));
            out += ow;
            continue;
          }
          for (int ox = 0; ox < ow; ++ox) {
            const int x = ox * g.stride - g.padding + kj * g.dilation;
            *out++ = (x >= 0 && x < w) ? plane[y * w + x] : T(0);
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
void col2im_add(const Tensor<T>& cols, const ConvGeometry& g,
                Tensor<T>& grad_input) {
  const int c_in = static_cast<int>(grad_input.dim(0));
  const int h = static_cast<int>(grad_input.dim(1));
  const int w = static_cast<int>(grad_input.dim(2));
  const int oh = g.out_h(h), ow = g.out_w(w);
  const T* src = cols.data();
  for (int c = 0; c < c_in; ++c) {
    T* plane = grad_input.data() + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < g.kernel_h; ++ki) {
      for (int kj = 0; kj < g.kernel_w; ++kj) {
        for (int oy = 0; oy < oh; ++oy) {
          const int y = oy * g.stride - g.padding + ki * g.dilation;
          if (y < 0 || y >= h) {
            src += ow;
            continue;
          }
          for (int ox = 0; ox < ow; ++ox, ++src) {
            const int x = ox * g.stride - g.padding + kj * g.dilation;
            if (x >= 0 && x < w) plane[y * w + x] += *src;
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> gemm_columns(const Tensor<T>& weight, const Tensor<T>& cols,
                       const Tensor<T>* bias, int out_h, int out_w) {
  const auto c_out = static_cast<Eigen::Index>(weight.dim(0));
  const auto ck = static_cast<Eigen::Index>(weight.numel() / weight.dim(0));
  const auto p = static_cast<Eigen::Index>(cols.dim(1));
  if (static_cast<Eigen::Index>(cols.dim(0)) != ck || p != out_h * out_w) {
    fail(ErrorKind::dimension,
         fmt::format("convolution: weight {} incompatible with columns {}",
                     shape_str(weight.shape()), shape_str(cols.shape())));
  }
  Tensor<T> out({static_cast<std::size_t>(c_out), static_cast<std::size_t>(out_h),
                 static_cast<std::size_t>(out_w)});
  Eigen::Map<const RowMat<T>> wm(weight.data(), c_out, ck);
  Eigen::Map<const RowMat<T>> cm(cols.data(), ck, p);
  Eigen::Map<RowMat<T>> om(out.data(), c_out, p);
  om.noalias() = wm * cm;
  if (bias != nullptr) {
    for (Eigen::Index o = 0; o < c_out; ++o) om.row(o).array() += (*bias)[o];
  }
  return out;
}

template <typename T>
void gemm_columns_backward(const Tensor<T>& weight, const Tensor<T>& cols,
                           const Tensor<T>& grad_output, Tensor<T>* grad_weight,
                           Tensor<T>* grad_bias, Tensor<T>* grad_cols) {
  const auto c_out = static_cast<Eigen::Index>(weight.dim(0));
  const auto ck = static_cast<Eigen::Index>(weight.numel() / weight.dim(0));
  const auto p = static_cast<Eigen::Index>(cols.dim(1));
  if (static_cast<Eigen::Index>(grad_output.numel()) != c_out * p) {
    fail(ErrorKind::dimension, "convolution backward: grad_output shape mismatch");
  }
  Eigen::Map<const RowMat<T>> gm(grad_output.data(), c_out, p);
  if (grad_weight != nullptr) {
    *grad_weight = Tensor<T>(weight.shape());
    Eigen::Map<RowMat<T>> gw(grad_weight->data(), c_out, ck);
    Eigen::Map<const RowMat<T>> cm(cols.data(), ck, p);
    gw.noalias() = gm * cm.transpose();
  }
  if (grad_bias != nullptr) {
    *grad_bias = Tensor<T>({static_cast<std::size_t>(c_out)});
    for (Eigen::Index o = 0; o < c_out; ++o) (*grad_bias)[o] = gm.row(o).sum();
  }
  if (grad_cols != nullptr) {
    *grad_cols = Tensor<T>(cols.shape());
    Eigen::Map<const RowMat<T>> wm(weight.data(), c_out, ck);
    Eigen::Map<RowMat<T>> gc(grad_cols->data(), ck, p);
    gc.noalias() = wm.transpose() * gm;
  }
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight,
                         const Tensor<T>* bias, const ConvGeometry& geom,
                         Conv2dCache<T>* cache) {
  if (input.rank() != 3 || weight.rank() != 4) {
    fail(ErrorKind::dimension, "conv2d: expected input [C,h,w] and weight [O,C,kh,kw]");
  }
  if (weight.dim(1) != input.dim(0) ||
      weight.dim(2) != static_cast<std::size_t>(geom.kernel_h) ||
      weight.dim(3) != static_cast<std::size_t>(geom.kernel_w)) {
    fail(ErrorKind::dimension,
         fmt::format("conv2d: weight {} does not match input {} and kernel {}x{}",
                     shape_str(weight.shape()), shape_str(input.shape()),
                     geom.kernel_h, geom.kernel_w));
  }
  if (bias != nullptr) check_shape(*bias, {weight.dim(0)}, "conv2d bias");
  check_finite(input, "conv2d input");
  const int h = static_cast<int>(input.dim(1)), w = static_cast<int>(input.dim(2));
  auto cols = im2col(input, geom);
  auto out = gemm_columns(weight, cols, bias, geom.out_h(h), geom.out_w(w));
  if (cache != nullptr) {
    cache->cols = std::move(cols);
    cache->weight = weight;
    cache->input_shape = input.shape();
    cache->geom = geom;
    cache->has_bias = bias != nullptr;
    cache->valid = true;
  }
  return out;
}

template <typename T>
GradPair<T> conv2d_backward(const Conv2dCache<T>& cache,
                            const Tensor<T>& grad_output) {
  if (!cache.valid) fail(ErrorKind::state, "conv2d_backward: missing forward cache");
  GradPair<T> out;
  Tensor<T> gw, gb, gcols;
  gemm_columns_backward(cache.weight, cache.cols, grad_output, &gw,
                        cache.has_bias ? &gb : nullptr, &gcols);
  Tensor<T> gx(cache.input_shape);
  col2im_add(gcols, cache.geom, gx);
  out.grads.emplace("input", std::move(gx));
  out.grads.emplace("weight", std::move(gw));
  if (cache.has_bias) out.grads.emplace("bias", std::move(gb));
  return out;
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& input, const Tensor<T>& weight,
                          const Tensor<T>& bias) {
  if (weight.rank() != 2 || weight.dim(1) != input.numel() ||
      bias.numel() != weight.dim(0)) {
    fail(ErrorKind::dimension,
         fmt::format("fully_connected: input {} weight {} bias {}",
                     shape_str(input.shape()), shape_str(weight.shape()),
                     shape_str(bias.shape())));
  }
  const std::size_t m = weight.dim(0), n = weight.dim(1);
  Tensor<T> out({m});
  for (std::size_t i = 0; i < m; ++i) {
    T acc = bias[i];
    const T* row = weight.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) acc += row[j] * input[j];
    out[i] = acc;
  }
  return out;
}

template <typename T>
GradPair<T> fully_connected_backward(const Tensor<T>& input,
                                     const Tensor<T>& weight,
                                     const Tensor<T>& grad_output) {
  const std::size_t m = weight.dim(0), n = weight.dim(1);
  if (grad_output.numel() != m || input.numel() != n) {
    fail(ErrorKind::dimension, "fully_connected_backward: shape mismatch");
  }
  Tensor<T> gx(input.shape()), gw(weight.shape()), gb({m});
  for (std::size_t i = 0; i < m; ++i) {
    const T g = grad_output[i];
    gb[i] = g;
    const T* row = weight.data() + i * n;
    T* grow = gw.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      grow[j] = g * input[j];
      gx[j] += g * row[j];
    }
  }
  GradPair<T> out;
  out.grads.emplace("input", std::move(gx));
  out.grads.emplace("weight", std::move(gw));
  out.grads.emplace("bias", std::move(gb));
  return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> activation_forward(Activation kind, const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const std::size_t n = input.numel();
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < n; ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid(input[i]);
  }
  return out;
}

template <typename T>
Tensor<T> activation_backward(Activation kind, const Tensor<T>& input,
                              const Tensor<T>& output,
                              const Tensor<T>& grad_output) {
  Tensor<T> g(grad_output.shape());
  const std::size_t n = grad_output.numel();
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < n; ++i) g[i] = input[i] > T(0) ? grad_output[i] : T(0);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = grad_output[i] * output[i] * (T(1) - output[i]);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Bilinear sampling
// ---------------------------------------------------------------------------

template <typename T>
T bilinear_at(const T* plane, int h, int w, T y, T x) {
  const T fy = std::floor(y), fx = std::floor(x);
  const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
  const int y1 = y0 + 1, x1 = x0 + 1;
  const T ly = y - fy, lx = x - fx;
  const T hy = T(1) - ly, hx = T(1) - lx;
  const bool r0 = y0 >= 0 && y0 < h, r1 = y1 >= 0 && y1 < h;
  const bool c0 = x0 >= 0 && x0 < w, c1 = x1 >= 0 && x1 < w;
  const T v00 = (r0 && c0) ? plane[y0 * w + x0] : T(0);
  const T v01 = (r0 && c1) ? plane[y0 * w + x1] : T(0);
  const T v10 = (r1 && c0) ? plane[y1 * w + x0] : T(0);
  const T v11 = (r1 && c1) ? plane[y1 * w + x1] : T(0);
  return hy * hx * v00 + hy * lx * v01 + ly * hx * v10 + ly * lx * v11;
}

template <typename T>
void bilinear_coord_grad(const T* plane, int h, int w, T y, T x, T& d_y,
                         T& d_x) {
  const T fy = std::floor(y), fx = std::floor(x);
  const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
  const int y1 = y0 + 1, x1 = x0 + 1;
  const T ly = y - fy, lx = x - fx;
  const bool r0 = y0 >= 0 && y0 < h, r1 = y1 >= 0 && y1 < h;
  const bool c0 = x0 >= 0 && x0 < w, c1 = x1 >= 0 && x1 < w;
  const T v00 = (r0 && c0) ? plane[y0 * w + x0] : T(0);
  const T v01 = (r0 && c1) ? plane[y0 * w + x1] : T(0);
  const T v10 = (r1 && c0) ? plane[y1 * w + x0] : T(0);
  const T v11 = (r1 && c1) ? plane[y1 * w + x1] : T(0);
  d_y = (T(1) - lx) * (v10 - v00) + lx * (v11 - v01);
  d_x = (T(1) - ly) * (v01 - v00) + ly * (v11 - v10);
}

template <typename T>
void bilinear_scatter(T* plane, int h, int w, T y, T x, T g) {
  const T fy = std::floor(y), fx = std::floor(x);
  const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
  const int y1 = y0 + 1, x1 = x0 + 1;
  const T ly = y - fy, lx = x - fx;
  const T hy = T(1) - ly, hx = T(1) - lx;
  const bool r0 = y0 >= 0 && y0 < h, r1 = y1 >= 0 && y1 < h;
  const bool c0 = x0 >= 0 && x0 < w, c1 = x1 >= 0 && x1 < w;
  if (r0 && c0) plane[y0 * w + x0] += hy * hx * g;
  if (r0 && c1) plane[y0 * w + x1] += hy * lx * g;
  if (r1 && c0) plane[y1 * w + x0] += ly * hx * g;
  if (r1 && c1) plane[y1 * w + x1] += ly * lx * g;
}

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& map, T x, T y) {
  if (map.rank() != 3) fail(ErrorKind::dimension, "bilinear_sample: map must be [C,h,w]");
  const int c = static_cast<int>(map.dim(0)), h = static_cast<int>(map.dim(1)),
            w = static_cast<int>(map.dim(2));
  Tensor<T> out({static_cast<std::size_t>(c)});
  for (int k = 0; k < c; ++k) {
    out[k] = bilinear_at(map.data() + static_cast<std::size_t>(k) * h * w, h, w, y, x);
  }
  return out;
}

template <typename T>
GradPair<T> bilinear_sample_backward(const Tensor<T>& map, T x, T y,
                                     const Tensor<T>& grad_output) {
  const int c = static_cast<int>(map.dim(0)), h = static_cast<int>(map.dim(1)),
            w = static_cast<int>(map.dim(2));
  check_shape(grad_output, {map.dim(0)}, "bilinear_sample_backward");
  Tensor<T> gmap(map.shape());
  Tensor<T> gcoord({2});
  for (int k = 0; k < c; ++k) {
    const std::size_t off = static_cast<std::size_t>(k) * h * w;
    bilinear_scatter(gmap.data() + off, h, w, y, x, grad_output[k]);
    T dy = 0, dx = 0;
    bilinear_coord_grad(map.data() + off, h, w, y, x, dy, dx);
    gcoord[0] += grad_output[k] * dx;
    gcoord[1] += grad_output[k] * dy;
  }
  GradPair<T> out;
  out.grads.emplace("map", std::move(gmap));
  out.grads.emplace("coord", std::move(gcoord));
  return out;
}

// ---------------------------------------------------------------------------
// Resize
// ---------------------------------------------------------------------------

namespace {

struct AxisTaps {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

// Source coordinate (dst + 0.5) * scale - 0.5, clamped to the valid range.
AxisTaps resize_taps(int in, int out) {
  AxisTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int d = 0; d < out; ++d) {
    double src = (d + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const int hi = std::min(lo + 1, in - 1);
    t.lo[d] = lo;
    t.hi[d] = hi;
    t.frac[d] = hi == lo ? 0.0 : src - lo;
  }
  return t;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& map, int out_h, int out_w) {
  if (map.rank() != 3) fail(ErrorKind::dimension, "bilinear_resize: map must be [C,h,w]");
  if (out_h < 1 || out_w < 1) {
    fail(ErrorKind::dimension, "bilinear_resize: target extent must be >= 1");
  }
  const int c = static_cast<int>(map.dim(0)), h = static_cast<int>(map.dim(1)),
            w = static_cast<int>(map.dim(2));
  if (h == out_h && w == out_w) return map;
  const auto ty = resize_taps(h, out_h), tx = resize_taps(w, out_w);
  Tensor<T> out({map.dim(0), static_cast<std::size_t>(out_h),
                 static_cast<std::size_t>(out_w)});
  for (int k = 0; k < c; ++k) {
    const T* src = map.data() + static_cast<std::size_t>(k) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(k) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const T ly = static_cast<T>(ty.frac[oy]), hy = T(1) - ly;
      const T* r0 = src + ty.lo[oy] * w;
      const T* r1 = src + ty.hi[oy] * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const T lx = static_cast<T>(tx.frac[ox]), hx = T(1) - lx;
        const int x0 = tx.lo[ox], x1 = tx.hi[ox];
        dst[oy * out_w + ox] =
            hy * (hx * r0[x0] + lx * r0[x1]) + ly * (hx * r1[x0] + lx * r1[x1]);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> bilinear_resize_backward(const Tensor<T>& grad_output, int in_h,
                                   int in_w) {
  const int c = static_cast<int>(grad_output.dim(0));
  const int out_h = static_cast<int>(grad_output.dim(1));
  const int out_w = static_cast<int>(grad_output.dim(2));
  if (in_h == out_h && in_w == out_w) return grad_output;
  const auto ty = resize_taps(in_h, out_h), tx = resize_taps(in_w, out_w);
  Tensor<T> g({grad_output.dim(0), static_cast<std::size_t>(in_h),
               static_cast<std::size_t>(in_w)});
  for (int k = 0; k < c; ++k) {
    const T* src = grad_output.data() + static_cast<std::size_t>(k) * out_h * out_w;
    T* dst = g.data() + static_cast<std::size_t>(k) * in_h * in_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const T ly = static_cast<T>(ty.frac[oy]), hy = T(1) - ly;
      T* r0 = dst + ty.lo[oy] * in_w;
      T* r1 = dst + ty.hi[oy] * in_w;
      for (int ox = 0; ox < out_w; ++ox) {
        const T lx = static_cast<T>(tx.frac[ox]), hx = T(1) - lx;
        const int x0 = tx.lo[ox], x1 = tx.hi[ox];
        const T v = src[oy * out_w + ox];
        r0[x0] += hy * hx * v;
        r0[x1] += hy * lx * v;
        r1[x0] += ly * hx * v;
        r1[x1] += ly * lx * v;
      }
    }
  }
  return g;
}

LabelMap nearest_resize(const LabelMap& labels, int out_h, int out_w) {
  if (labels.rank() != 2 || out_h < 1 || out_w < 1) {
    fail(ErrorKind::dimension, "nearest_resize: expected [h,w] and positive target");
  }
  const int h = static_cast<int>(labels.dim(0)), w = static_cast<int>(labels.dim(1));
  LabelMap out({static_cast<std::size_t>(out_h), static_cast<std::size_t>(out_w)});
  auto pick = [](int d, int in, int out) {
    const double src = (d + 0.5) * static_cast<double>(in) / out - 0.5;
    const int i = static_cast<int>(std::lround(std::max(src, 0.0)));
    return std::min(i, in - 1);
  };
  for (int oy = 0; oy < out_h; ++oy) {
    const int sy = pick(oy, h, out_h);
    for (int ox = 0; ox < out_w; ++ox) {
      out(oy, ox) = labels(sy, pick(ox, w, out_w));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                            const LabelMap& labels,
                                            int ignore_label,
                                            const Tensor<T>* class_weights) {
  if (logits.rank() != 3 || labels.rank() != 2 || labels.dim(0) != logits.dim(1) ||
      labels.dim(1) != logits.dim(2)) {
    fail(ErrorKind::dimension,
         fmt::format("softmax_cross_entropy: logits {} vs labels {}",
                     shape_str(logits.shape()), shape_str(labels.shape())));
  }
  const int nc = static_cast<int>(logits.dim(0));
  if (class_weights != nullptr) {
    check_shape(*class_weights, {logits.dim(0)}, "class weights");
  }
  const std::size_t plane = labels.numel();
  CrossEntropyResult<T> r;
  r.grad_logits = Tensor<T>(logits.shape());
  std::vector<T> prob(nc);
  double total = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    const int y = labels[p];
    if (y == ignore_label) continue;
    if (y < 0 || y >= nc) {
      fail(ErrorKind::data, fmt::format("label {} outside [0,{})", y, nc));
    }
    ++r.counted_pixels;
  }
  if (r.counted_pixels == 0) {
    r.all_ignored = true;
    return r;
  }
  const T inv_n = T(1) / static_cast<T>(r.counted_pixels);
  for (std::size_t p = 0; p < plane; ++p) {
    const int y = labels[p];
    if (y == ignore_label) continue;
    T mx = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < nc; ++c) mx = std::max(mx, logits[c * plane + p]);
    T sum = 0;
    for (int c = 0; c < nc; ++c) {
      prob[c] = std::exp(logits[c * plane + p] - mx);
      sum += prob[c];
    }
    const T wgt = class_weights ? (*class_weights)[y] : T(1);
    const T log_p = logits[y * plane + p] - mx - std::log(sum);
    total -= static_cast<double>(wgt * log_p);
    for (int c = 0; c < nc; ++c) {
      const T pc = prob[c] / sum;
      r.grad_logits[c * plane + p] = wgt * inv_n * (pc - (c == y ? T(1) : T(0)));
    }
  }
  r.loss = static_cast<T>(total / static_cast<double>(r.counted_pixels));
  return r;
}

template <typename T>
LabelMap argmax_classes(const Tensor<T>& logits) {
  const std::size_t nc = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  const std::size_t plane = h * w;
  LabelMap out({h, w});
  for (std::size_t p = 0; p < plane; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < nc; ++c) {
      if (logits[c * plane + p] > logits[best * plane + p]) best = c;
    }
    out[p] = static_cast<std::int32_t>(best);
  }
  return out;
}

#define SCONV_INSTANTIATE(T)                                                          \
  template struct GradPair<T>;                                                        \
  template Tensor<T> im2col<T>(const Tensor<T>&, const ConvGeometry&);                \
  template void col2im_add<T>(const Tensor<T>&, const ConvGeometry&, Tensor<T>&);     \
  template Tensor<T> gemm_columns<T>(const Tensor<T>&, const Tensor<T>&,              \
                                     const Tensor<T>*, int, int);                     \
  template void gemm_columns_backward<T>(const Tensor<T>&, const Tensor<T>&,          \
                                         const Tensor<T>&, Tensor<T>*, Tensor<T>*,    \
                                         Tensor<T>*);                                 \
  template Tensor<T> conv2d_forward<T>(const Tensor<T>&, const Tensor<T>&,            \
                                       const Tensor<T>*, const ConvGeometry&,         \
                                       Conv2dCache<T>*);                              \
  template GradPair<T> conv2d_backward<T>(const Conv2dCache<T>&, const Tensor<T>&);   \
  template Tensor<T> fully_connected<T>(const Tensor<T>&, const Tensor<T>&,           \
                                        const Tensor<T>&);                            \
  template GradPair<T> fully_connected_backward<T>(const Tensor<T>&,                  \
                                                   const Tensor<T>&,                  \
                                                   const Tensor<T>&);                 \
  template Tensor<T> activation_forward<T>(Activation, const Tensor<T>&);             \
  template Tensor<T> activation_backward<T>(Activation, const Tensor<T>&,             \
                                            const Tensor<T>&, const Tensor<T>&);      \
  template T bilinear_at<T>(const T*, int, int, T, T);                                \
  template void bilinear_coord_grad<T>(const T*, int, int, T, T, T&, T&);             \
  template void bilinear_scatter<T>(T*, int, int, T, T, T);                           \
  template Tensor<T> bilinear_sample<T>(const Tensor<T>&, T, T);                      \
  template GradPair<T> bilinear_sample_backward<T>(const Tensor<T>&, T, T,            \
                                                   const Tensor<T>&);                 \
  template Tensor<T> bilinear_resize<T>(const Tensor<T>&, int, int);                  \
  template Tensor<T> bilinear_resize_backward<T>(const Tensor<T>&, int, int);         \
  template CrossEntropyResult<T> softmax_cross_entropy<T>(                            \
      const Tensor<T>&, const LabelMap&, int, const Tensor<T>*);                      \
  template LabelMap argmax_classes<T>(const Tensor<T>&);

SCONV_INSTANTIATE(float)
SCONV_INSTANTIATE(double)
#undef SCONV_INSTANTIATE

}  // namespace sconv

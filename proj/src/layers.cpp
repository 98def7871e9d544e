#include "sconv/layers.hpp"

#include <cmath>

#include <fmt/format.h>

namespace sconv {

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  check_shape(src, dst.shape(), "add_inplace");
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

template <typename T>
Conv2dLayer<T>::Conv2dLayer(std::string name, int c_in, int c_out, ConvGeometry geom,
                            bool bias, std::mt19937_64& rng)
    : geom_(geom), has_bias_(bias) {
  const std::size_t k = geom.taps();
  w_ = Param<T>(name + ".w", {static_cast<std::size_t>(c_out), static_cast<std::size_t>(c_in),
                              static_cast<std::size_t>(geom.kernel_h),
                              static_cast<std::size_t>(geom.kernel_w)});
  he_uniform(w_.value, static_cast<std::size_t>(c_in) * k, rng);
  if (bias) b_ = Param<T>(name + ".b", {static_cast<std::size_t>(c_out)});
}

template <typename T>
Tensor<T> Conv2dLayer<T>::forward(const Tensor<T>& x) {
  return conv2d_forward(x, w_.value, has_bias_ ? &b_.value : nullptr, geom_, &cache_);
}

template <typename T>
Tensor<T> Conv2dLayer<T>::backward(const Tensor<T>& grad_output) {
  if (!cache_.valid) fail(ErrorKind::state, "conv layer backward without forward");
  Tensor<T> gw, gb, gcols;
  gemm_columns_backward(cache_.weight, cache_.cols, grad_output, &gw,
                        has_bias_ ? &gb : nullptr, &gcols);
  add_inplace(w_.grad, gw);
  if (has_bias_) add_inplace(b_.grad, gb);
  Tensor<T> gx(cache_.input_shape);
  col2im_add(gcols, geom_, gx);
  return gx;
}

template <typename T>
std::vector<Param<T>*> Conv2dLayer<T>::params() {
  if (has_bias_) return {&w_, &b_};
  return {&w_};
}

template <typename T>
ChannelNorm<T>::ChannelNorm(std::string name, int channels) {
  const Shape s{static_cast<std::size_t>(channels)};
  scale_ = Param<T>(name + ".scale", s, false);
  scale_.value.fill(T(1));
  shift_ = Param<T>(name + ".shift", s, false);
  running_mean_ = Param<T>(name + ".running_mean", s, false);
  running_var_ = Param<T>(name + ".running_var", s, false);
  running_var_.value.fill(T(1));
}

template <typename T>
Tensor<T> ChannelNorm<T>::forward(const Tensor<T>& x, Mode mode) {
  const std::size_t c = x.dim(0);
  if (c != scale_.numel()) {
    fail(ErrorKind::dimension, fmt::format("{}: expected {} channels, got {}", scale_.name,
                                           scale_.numel(), c));
  }
  const std::size_t plane = x.numel() / c;
  Tensor<T> y(x.shape());
  x_hat_ = Tensor<T>(x.shape());
  inv_std_.assign(c, T(0));
  for (std::size_t k = 0; k < c; ++k) {
    const T* xp = x.data() + k * plane;
    T mean, var;
    if (mode == Mode::train) {
      double s = 0;
      for (std::size_t i = 0; i < plane; ++i) s += xp[i];
      mean = static_cast<T>(s / plane);
      double v = 0;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = xp[i] - mean;
        v += d * d;
      }
      var = static_cast<T>(v / plane);
      running_mean_.value[k] = (T(1) - momentum) * running_mean_.value[k] + momentum * mean;
      running_var_.value[k] = (T(1) - momentum) * running_var_.value[k] + momentum * var;
    } else {
      mean = running_mean_.value[k];
      var = running_var_.value[k];
    }
    const T is = T(1) / std::sqrt(var + eps);
    inv_std_[k] = is;
    const T a = scale_.value[k], b = shift_.value[k];
    T* hp = x_hat_.data() + k * plane;
    T* yp = y.data() + k * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      hp[i] = (xp[i] - mean) * is;
      yp[i] = a * hp[i] + b;
    }
  }
  last_mode_ = mode;
  cached_ = true;
  return y;
}

template <typename T>
Tensor<T> ChannelNorm<T>::backward(const Tensor<T>& g) {
  if (!cached_) fail(ErrorKind::state, "norm backward without forward");
  const std::size_t c = g.dim(0), plane = g.numel() / c;
  Tensor<T> gx(g.shape());
  for (std::size_t k = 0; k < c; ++k) {
    const T* gp = g.data() + k * plane;
    const T* hp = x_hat_.data() + k * plane;
    T sum_g = 0, sum_gh = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      sum_g += gp[i];
      sum_gh += gp[i] * hp[i];
    }
    scale_.grad[k] += sum_gh;
    shift_.grad[k] += sum_g;
    const T a = scale_.value[k], is = inv_std_[k];
    T* gxp = gx.data() + k * plane;
    if (last_mode_ == Mode::train) {
      const T n = static_cast<T>(plane);
      for (std::size_t i = 0; i < plane; ++i) {
        gxp[i] = a * is * (gp[i] - sum_g / n - hp[i] * sum_gh / n);
      }
    } else {
      for (std::size_t i = 0; i < plane; ++i) gxp[i] = a * is * gp[i];
    }
  }
  return gx;
}

template <typename T>
std::vector<Param<T>*> ChannelNorm<T>::params() {
  return {&scale_, &shift_};
}

template <typename T>
std::vector<Param<T>*> ChannelNorm<T>::buffers() {
  return {&running_mean_, &running_var_};
}

template class Conv2dLayer<float>;
template class Conv2dLayer<double>;
template class ChannelNorm<float>;
template class ChannelNorm<double>;
template void add_inplace<float>(Tensor<float>&, const Tensor<float>&);
template void add_inplace<double>(Tensor<double>&, const Tensor<double>&);

}  // namespace sconv

#pragma once

#include <random>
#include <string>
#include <vector>

#include "sconv/ops.hpp"
#include "sconv/param.hpp"

namespace sconv {

enum class Mode { train, eval };

// Convolution with owned parameters and a single-sample cache.
template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(std::string name, int c_in, int c_out, ConvGeometry geom, bool bias,
              std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& grad_output);

  std::vector<Param<T>*> params();
  std::size_t param_count() const { return w_.numel() + (has_bias_ ? b_.numel() : 0); }
  const ConvGeometry& geom() const { return geom_; }
  int in_channels() const { return static_cast<int>(w_.value.dim(1)); }
  int out_channels() const { return static_cast<int>(w_.value.dim(0)); }
  Param<T>& weight() { return w_; }

 private:
  ConvGeometry geom_;
  bool has_bias_ = false;
  Param<T> w_, b_;
  Conv2dCache<T> cache_;
};

// Per-channel normalization without batch statistics. Training normalizes
// each sample with its own spatial statistics and updates running averages;
// evaluation uses the running averages.
template <typename T>
class ChannelNorm {
 public:
  ChannelNorm() = default;
  ChannelNorm(std::string name, int channels);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& grad_output);

  // scale and shift; both excluded from weight decay.
  std::vector<Param<T>*> params();
  // Running statistics, serialized with the checkpoint but not learned.
  std::vector<Param<T>*> buffers();

  T eps = T(1e-5);
  T momentum = T(0.1);

 private:
  Param<T> scale_, shift_, running_mean_, running_var_;
  Mode last_mode_ = Mode::eval;
  Tensor<T> x_hat_;
  std::vector<T> inv_std_;
  bool cached_ = false;
};

// ReLU that remembers its mask.
template <typename T>
class ReluLayer {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    return activation_forward(Activation::relu, x);
  }
  Tensor<T> backward(const Tensor<T>& g) {
    return activation_backward(Activation::relu, input_, input_, g);
  }

 private:
  Tensor<T> input_;
};

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src);

}  // namespace sconv

#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sconv/tensor.hpp"

namespace sconv {

// Kernel extents, stride, padding and dilation of a 2D convolution plus the
// fixed tap grid. Taps are enumerated row-major; tap i sits at kernel row
// i / kernel_w and column i % kernel_w.
struct ConvGeometry {
  int kernel_h = 3;
  int kernel_w = 3;
  int stride = 1;
  int padding = 1;
  int dilation = 1;

  int taps() const { return kernel_h * kernel_w; }
  int out_h(int h) const {
    return (h + 2 * padding - dilation * (kernel_h - 1) - 1) / stride + 1;
  }
  int out_w(int w) const {
    return (w + 2 * padding - dilation * (kernel_w - 1) - 1) / stride + 1;
  }
  // Centered integer offsets (dy, dx) of each tap; for 3x3 this is
  // (-1,-1), (-1,0), ..., (1,1).
  std::vector<std::array<int, 2>> kernel_grid() const;

  static ConvGeometry square(int k, int stride = 1, int padding = -1,
                             int dilation = 1) {
    return {k, k, stride, padding < 0 ? dilation * (k - 1) / 2 : padding,
            dilation};
  }

  bool operator==(const ConvGeometry&) const = default;
};

// A forward value together with named gradients. Every gradient has the
// shape of the tensor it differentiates with respect to.
template <typename T>
struct GradPair {
  Tensor<T> value;
  std::map<std::string, Tensor<T>> grads;

  const Tensor<T>& grad(const std::string& name) const;
};

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

// Unfolds input [C,h,w] into columns [C*K, h'*w'], zero outside the image.
template <typename T>
Tensor<T> im2col(const Tensor<T>& input, const ConvGeometry& geom);

// Adds the column gradient back onto an input-shaped tensor.
template <typename T>
void col2im_add(const Tensor<T>& cols, const ConvGeometry& geom,
                Tensor<T>& grad_input);

// out[C_out, P] = weight[C_out, C_in*K] * cols[C_in*K, P] (+ bias).
// Shared by plain and spatially guided convolution so that identical
// columns give bit-identical outputs.
template <typename T>
Tensor<T> gemm_columns(const Tensor<T>& weight, const Tensor<T>& cols,
                       const Tensor<T>* bias, int out_h, int out_w);

template <typename T>
struct Conv2dCache {
  Tensor<T> cols;
  Tensor<T> weight;
  Shape input_shape;
  ConvGeometry geom;
  bool has_bias = false;
  bool valid = false;
};

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight,
                         const Tensor<T>* bias, const ConvGeometry& geom,
                         Conv2dCache<T>* cache = nullptr);

// Gradients "input", "weight" and (if the forward had one) "bias".
template <typename T>
GradPair<T> conv2d_backward(const Conv2dCache<T>& cache,
                            const Tensor<T>& grad_output);

// Given the column gradient and weight, the pieces shared by every
// GEMM-backed convolution.
template <typename T>
void gemm_columns_backward(const Tensor<T>& weight, const Tensor<T>& cols,
                           const Tensor<T>& grad_output, Tensor<T>* grad_weight,
                           Tensor<T>* grad_bias, Tensor<T>* grad_cols);

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& input, const Tensor<T>& weight,
                          const Tensor<T>& bias);

// Gradients "input", "weight", "bias".
template <typename T>
GradPair<T> fully_connected_backward(const Tensor<T>& input,
                                     const Tensor<T>& weight,
                                     const Tensor<T>& grad_output);

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { relu, sigmoid };

template <typename T>
Tensor<T> activation_forward(Activation kind, const Tensor<T>& input);

// relu'(0) is taken as 0. For sigmoid the derivative is computed from the
// forward output, so pass `output` for sigmoid and `input` for relu.
template <typename T>
Tensor<T> activation_backward(Activation kind, const Tensor<T>& input,
                              const Tensor<T>& output,
                              const Tensor<T>& grad_output);

template <typename T>
inline T sigmoid(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

// ---------------------------------------------------------------------------
// Bilinear sampling with zero padding
// ---------------------------------------------------------------------------

// Value of one plane [h,w] at fractional (y, x). Each of the four taps that
// falls outside the plane contributes zero.
template <typename T>
T bilinear_at(const T* plane, int h, int w, T y, T x);

// Partial derivatives of bilinear_at with respect to y and x.
template <typename T>
void bilinear_coord_grad(const T* plane, int h, int w, T y, T x, T& d_y,
                         T& d_x);

// plane[tap] += weight_of_tap * g for every in-bounds tap.
template <typename T>
void bilinear_scatter(T* plane, int h, int w, T y, T x, T g);

// Samples every channel of map [C,h,w] at column x, row y.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& map, T x, T y);

// Gradients "map" (shape of map) and "coord" (shape [2]: d/dx, d/dy) given
// the upstream gradient of the sampled [C] vector.
template <typename T>
GradPair<T> bilinear_sample_backward(const Tensor<T>& map, T x, T y,
                                     const Tensor<T>& grad_output);

// ---------------------------------------------------------------------------
// Bilinear resize (align_corners = false, edge-clamped)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& map, int out_h, int out_w);

template <typename T>
Tensor<T> bilinear_resize_backward(const Tensor<T>& grad_output, int in_h,
                                   int in_w);

// Nearest-neighbour resize for label maps using the same source-coordinate
// convention.
LabelMap nearest_resize(const LabelMap& labels, int out_h, int out_w);

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <typename T>
struct CrossEntropyResult {
  T loss = 0;
  Tensor<T> grad_logits;
  std::size_t counted_pixels = 0;
  bool all_ignored = false;
};

// Mean over non-ignored pixels of the (optionally class-weighted) negative
// log-softmax. A map with every pixel ignored yields loss 0, zero gradient
// and all_ignored = true.
template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                            const LabelMap& labels,
                                            int ignore_label,
                                            const Tensor<T>* class_weights);

// Per-pixel argmax over the class axis of [p_c,h,w].
template <typename T>
LabelMap argmax_classes(const Tensor<T>& logits);

}  // namespace sconv

#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "sconv/ops.hpp"
#include "sconv/param.hpp"

namespace sconv {

// Width of the projected spatial guidance map S'.
inline constexpr int kProjectedChannels = 64;

enum class SpatialSource { depth, hha, coords, rgb_feature };

std::string_view spatial_source_name(SpatialSource s);
SpatialSource parse_spatial_source(std::string_view name);
int spatial_source_channels(SpatialSource s);

template <typename T>
struct ProjectedSpatial {
  Tensor<T> s_prime;  // [64,h,w]
  SpatialSource source_kind = SpatialSource::depth;

  int height() const { return static_cast<int>(s_prime.dim(1)); }
  int width() const { return static_cast<int>(s_prime.dim(2)); }
};

// Per output position and tap, the fractional (dy, dx) displacement.
template <typename T>
struct OffsetField {
  Tensor<T> delta_d;  // [K,h',w',2]
};

template <typename T>
struct GatheredSpatial {
  Tensor<T> s_star;  // [h',w',64K], tap-major then channel
};

template <typename T>
struct ModulationField {
  Tensor<T> m;  // [K,h',w'], each entry in (0,1)
};

// ---------------------------------------------------------------------------
// Spatial projector: three 3x3 convolutions c' -> 64 -> 64 -> 64 with ReLU.
// ---------------------------------------------------------------------------

template <typename T>
class SpatialProjector {
 public:
  SpatialProjector() = default;
  SpatialProjector(int in_channels, std::mt19937_64& rng);

  ProjectedSpatial<T> forward(const Tensor<T>& spatial, SpatialSource kind);
  // Accumulates parameter gradients and returns the gradient with respect to
  // the raw spatial input.
  Tensor<T> backward(const Tensor<T>& grad_projected);

  std::vector<Param<T>*> params();
  int in_channels() const { return in_channels_; }
  // Pre-activation maps of the last forward (used to detect ReLU kinks).
  const std::array<Tensor<T>, 3>& last_pre_activations() const { return pre_act_; }
  std::size_t param_count() const;

 private:
  int in_channels_ = 0;
  std::array<Param<T>, 3> weight_;
  std::array<Param<T>, 3> bias_;
  std::array<Conv2dCache<T>, 3> conv_cache_;
  std::array<Tensor<T>, 3> pre_act_;
};

template <typename T>
ProjectedSpatial<T> resize_spatial(const ProjectedSpatial<T>& sp, int h, int w);

// ---------------------------------------------------------------------------
// S-Conv layer state
// ---------------------------------------------------------------------------

struct SConvOptions {
  int in_channels = 0;
  int out_channels = 0;
  ConvGeometry geom;
  bool bias = false;
  // Hidden width of the position-wise weight generator; <= 0 means 64*K.
  int f_hidden = 0;
};

// One bilinear read: four plane indices (-1 when outside) and the fractional
// position inside the cell.
template <typename T>
struct SampleTap {
  std::array<std::int32_t, 4> idx;  // (y0,x0) (y0,x1) (y1,x0) (y1,x1)
  T ly;
  T lx;
};

template <typename T>
class SConvState {
 public:
  SConvState() = default;
  // Host weight He-uniform, first weight-generator layer He-uniform, offset
  // generator and final weight-generator layer zero.
  SConvState(const SConvOptions& opt, std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& input, const ProjectedSpatial<T>& sp);

  struct Backward {
    Tensor<T> input;    // dL/dX
    Tensor<T> spatial;  // dL/dS' at the resolution the layer consumed
  };
  // Accumulates into every Param's grad.
  Backward backward(const Tensor<T>& grad_output);

  std::vector<Param<T>*> params();
  std::vector<Param<T>*> host_params();
  std::vector<Param<T>*> guidance_params();

  const SConvOptions& options() const { return opt_; }
  int taps() const { return opt_.geom.taps(); }
  int f_hidden() const { return hidden_; }

  Param<T>& weight() { return w_; }
  Param<T>& bias() { return b_; }
  Param<T>& eta_weight() { return eta_w_; }
  Param<T>& eta_bias() { return eta_b_; }
  Param<T>& f0_weight() { return f0_w_; }
  Param<T>& f0_bias() { return f0_b_; }
  Param<T>& f1_weight() { return f1_w_; }
  Param<T>& f1_bias() { return f1_b_; }

  // Degenerate switches: offsets pinned to zero and/or mask pinned to one.
  bool freeze_offsets_zero = false;
  bool freeze_mask_one = false;

  // Results of the last forward pass.
  const OffsetField<T>& last_offsets() const { return offsets_; }
  const GatheredSpatial<T>& last_gathered() const { return gathered_; }
  const ModulationField<T>& last_mask() const { return mask_; }
  bool has_cache() const { return cached_; }
  const std::vector<SampleTap<T>>& last_taps() const { return taps_; }
  const Tensor<T>& last_hidden_pre() const { return hidden_pre_; }

  std::size_t param_count() const;
  std::size_t host_param_count() const;
  std::size_t guidance_param_count() const;

 private:
  SConvOptions opt_;
  int hidden_ = 0;
  Param<T> w_, b_, eta_w_, eta_b_, f0_w_, f0_b_, f1_w_, f1_b_;

  bool cached_ = false;
  Tensor<T> input_;
  Tensor<T> s_prime_;
  Conv2dCache<T> eta_cache_;
  std::vector<SampleTap<T>> taps_;  // [K * P]
  OffsetField<T> offsets_;
  GatheredSpatial<T> gathered_;
  Tensor<T> hidden_pre_;  // [P, H]
  Tensor<T> hidden_act_;  // [P, H]
  ModulationField<T> mask_;
  Tensor<T> cols_;
  int out_h_ = 0, out_w_ = 0;
};

// ---------------------------------------------------------------------------
// Free-function pipeline
// ---------------------------------------------------------------------------

template <typename T>
ProjectedSpatial<T> spatial_project(const Tensor<T>& spatial,
                                    SpatialProjector<T>& phi,
                                    SpatialSource kind);

// One convolution 64 -> 2K with the host geometry, reshaped to [K,h',w',2]
// with (dy, dx) per tap.
template <typename T>
OffsetField<T> generate_offsets(const ProjectedSpatial<T>& sp,
                                const Tensor<T>& eta_weight,
                                const Tensor<T>& eta_bias,
                                const ConvGeometry& geom);

template <typename T>
GatheredSpatial<T> gather_spatial(const ProjectedSpatial<T>& sp,
                                  const ConvGeometry& geom,
                                  const OffsetField<T>& offsets);

// FC(64K -> H) + ReLU + FC(H -> K) at every position, then sigmoid.
template <typename T>
ModulationField<T> generate_weight_mask(const GatheredSpatial<T>& gathered,
                                        const Tensor<T>& f0_weight,
                                        const Tensor<T>& f0_bias,
                                        const Tensor<T>& f1_weight,
                                        const Tensor<T>& f1_bias);

template <typename T>
Tensor<T> sconv_forward(const Tensor<T>& input, SConvState<T>& state,
                        const ProjectedSpatial<T>& sp);

// Gradients named "input", "spatial", and every parameter by its layer-local
// name ("w", "b", "eta.w", "eta.b", "f.0.w", "f.0.b", "f.1.w", "f.1.b").
// Parameter grads are reset before the pass.
template <typename T>
GradPair<T> sconv_backward(SConvState<T>& state, const Tensor<T>& grad_output);

// Host conv + offset generator + weight generator parameter count.
template <typename T>
std::size_t param_count(const SConvState<T>& state);

// Closed-form counts from layer shapes.
std::size_t host_conv_param_count(int c_in, int c_out, const ConvGeometry& g,
                                  bool bias);
std::size_t offset_generator_param_count(const ConvGeometry& g);
std::size_t weight_generator_param_count(int taps, int hidden);
std::size_t projector_param_count(int in_channels);

}  // namespace sconv

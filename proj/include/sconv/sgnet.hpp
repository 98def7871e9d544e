#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sconv/data_io.hpp"
#include "sconv/layers.hpp"
#include "sconv/sconv_op.hpp"

namespace sconv {

struct NetworkConfig {
  std::vector<int> widths{16, 32, 64, 128};
  int blocks = 2;
  int num_classes = 6;
  SpatialSource source = SpatialSource::depth;
  bool normalize_spatial = true;
  // Per stage, indices of the 3x3 convolutions (counted 0..2*blocks-1 in
  // forward order) that become S-Conv. Empty lists give the plain baseline.
  std::vector<std::vector<int>> sconv_policy = default_policy(4, 2);
  bool deep_supervision = true;
  int decoder_channels = 64;
  int decoder_convs = 2;
  int f_hidden = 16;
  // Input-resolution divisor applied before the spatial projector.
  int phi_stride = 1;
  std::uint64_t seed = 0;

  // First and last two 3x3 convolutions of every stage.
  static std::vector<std::vector<int>> default_policy(int stages, int blocks);
  static std::vector<std::vector<int>> empty_policy(int stages) {
    return std::vector<std::vector<int>>(stages);
  }
  NetworkConfig baseline() const;

  void validate() const;
  int stages() const { return static_cast<int>(widths.size()); }
  int spatial_channels() const { return spatial_source_channels(source); }
  int output_stride() const { return 2 << (stages() - 1); }
};

struct ParamBreakdown {
  std::size_t backbone = 0;
  std::size_t sconv_extra = 0;  // offset + weight generators + projector
  std::size_t decoder = 0;      // decoder and auxiliary head
  std::size_t total = 0;

  double sconv_extra_percent() const {
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(sconv_extra) / static_cast<double>(total);
  }
};

// Closed-form breakdown from the configuration alone.
ParamBreakdown expected_param_count(const NetworkConfig& cfg);

template <typename T>
struct SegOutput {
  Tensor<T> logits;              // [classes,h,w]
  std::optional<Tensor<T>> aux;  // present iff deep supervision is enabled
};

template <typename T>
class SegModel {
 public:
  explicit SegModel(const NetworkConfig& cfg);
  SegModel(const SegModel&) = delete;
  SegModel& operator=(const SegModel&) = delete;
  ~SegModel();

  SegOutput<T> forward(const Tensor<T>& image, const Tensor<T>& spatial, Mode mode);
  // Accumulates gradients into every parameter. grad_aux may be null.
  void backward(const Tensor<T>& grad_logits, const Tensor<T>* grad_aux);

  // Learnable parameters in registry order.
  std::vector<Param<T>*> params();
  // Normalization running statistics.
  std::vector<Param<T>*> buffers();
  // Everything a checkpoint stores.
  std::vector<Param<T>*> state();
  Param<T>* find(const std::string& name);
  void zero_grad();

  // Copies every same-named, same-shaped tensor from `other`; returns the
  // number copied.
  int copy_state_from(SegModel& other);

  ParamBreakdown count_params();
  int sconv_count() const;

  struct SConvLayerRef {
    std::string name;  // e.g. stage2.block1.conv0
    int stage, block, conv;
    SConvState<T>* layer;
  };
  std::vector<SConvLayerRef> sconv_layers();

  // Pins every S-Conv to zero offsets and unit mask.
  void set_degenerate(bool on);

  const NetworkConfig& config() const { return cfg_; }

 private:
  struct Impl;
  NetworkConfig cfg_;
  std::unique_ptr<Impl> impl_;
};

// Raw spatial tensor for the configured source: depth [1,h,w] in meters,
// HHA or camera coordinates [3,h,w]. Holes are filled first; the result is
// normalized per channel when the config asks for it.
Tensor<double> build_spatial_input(const DepthMap& depth, const CameraIntrinsics& k,
                                   SpatialSource source, bool normalize);

// Per S-Conv layer: sum over taps of the offset norm at each output
// position, min-max scaled to [0,255]. Uses the offsets of a fresh eval
// forward on (image, spatial).
template <typename T>
struct ReceptiveFieldMap {
  std::string name;
  int stage, block, conv;
  Tensor<T> map;  // [1,h',w']
};

template <typename T>
std::vector<ReceptiveFieldMap<T>> receptive_field_map(SegModel<T>& model, const Tensor<T>& image,
                                                      const Tensor<T>& spatial);

std::string rf_file_name(int stage, int block, int conv);

}  // namespace sconv

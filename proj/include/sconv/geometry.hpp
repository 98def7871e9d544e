#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "sconv/tensor.hpp"

namespace sconv {

// Depth in meters with a validity mask; zero, negative or non-finite
// readings are holes.
struct DepthMap {
  Tensor<double> values;       // [1,h,w]
  std::vector<std::uint8_t> valid;  // h*w, 1 = valid

  int height() const { return static_cast<int>(values.dim(1)); }
  int width() const { return static_cast<int>(values.dim(2)); }
  bool fully_valid() const;

  static DepthMap from_values(Tensor<double> values);
};

struct CameraIntrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;

  void validate() const;
  // Whitespace-separated "fx fy cx cy".
  static CameraIntrinsics load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

// Fills holes with the value of the nearest valid pixel (breadth-first over
// 4-neighbours, seeded in raster order). Valid pixels are untouched.
DepthMap sanitize_depth(const DepthMap& raw);

// Pinhole back-projection: X = (u - cx) z / fx, Y = (v - cy) z / fy, Z = z,
// with u the column and v the row index.
Tensor<double> depth_to_coords(const DepthMap& depth, const CameraIntrinsics& k);

// Simplified HHA before per-channel normalization: disparity 1/z, height
// along -gravity above the lowest point, and the angle in radians between
// the camera-facing surface normal and gravity.
Tensor<double> depth_to_hha_raw(const DepthMap& depth, const CameraIntrinsics& k,
                                const std::array<double, 3>& gravity = {0, -1, 0});

// depth_to_hha_raw with each channel mapped affinely onto [0,1].
Tensor<double> depth_to_hha(const DepthMap& depth, const CameraIntrinsics& k,
                            const std::array<double, 3>& gravity = {0, -1, 0});

// Camera-facing unit normals [3,h,w] from central differences of the
// back-projected points; border pixels copy the nearest interior normal.
Tensor<double> surface_normals(const Tensor<double>& coords);

struct NormalizeStats {
  std::vector<double> mean;
  std::vector<double> stddev;  // clamped below by eps
};

// Per-channel zero mean / unit variance. Constant channels become zero.
Tensor<double> normalize_spatial(const Tensor<double>& s, NormalizeStats* stats = nullptr,
                                 double eps = 1e-8);

Tensor<double> denormalize_spatial(const Tensor<double>& s, const NormalizeStats& stats);

}  // namespace sconv

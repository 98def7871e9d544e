#include "sconv/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>

#include <fmt/format.h>

namespace sconv {

bool DepthMap::fully_valid() const {
  return std::all_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; });
}

DepthMap DepthMap::from_values(Tensor<double> values) {
  if (values.rank() != 3 || values.dim(0) != 1) {
    fail(ErrorKind::dimension, "depth map must be [1,h,w], got " + shape_str(values.shape()));
  }
  DepthMap d;
  d.valid.resize(values.numel());
  for (std::size_t i = 0; i < values.numel(); ++i) {
    d.valid[i] = std::isfinite(values[i]) && values[i] > 0 ? 1 : 0;
  }
  d.values = std::move(values);
  return d;
}

void CameraIntrinsics::validate() const {
  if (!(fx > 0) || !(fy > 0) || !std::isfinite(cx) || !std::isfinite(cy)) {
    fail(ErrorKind::data, fmt::format("invalid intrinsics fx={} fy={} cx={} cy={}", fx, fy, cx, cy));
  }
}

CameraIntrinsics CameraIntrinsics::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::io, "cannot open intrinsics file: " + path.string());
  CameraIntrinsics k;
  if (!(is >> k.fx >> k.fy >> k.cx >> k.cy)) {
    fail(ErrorKind::io, "intrinsics file needs 4 reals (fx fy cx cy): " + path.string());
  }
  k.validate();
  return k;
}

void CameraIntrinsics::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::io, "cannot write intrinsics file: " + path.string());
  os << fmt::format("{} {} {} {}\n", fx, fy, cx, cy);
}

DepthMap sanitize_depth(const DepthMap& raw) {
  const int h = raw.height(), w = raw.width();
  DepthMap out = raw;
  std::deque<int> queue;
  for (int i = 0; i < h * w; ++i) {
    if (raw.valid[i]) queue.push_back(i);
  }
  if (queue.empty()) fail(ErrorKind::data, "depth map has no valid pixels");
  if (static_cast<int>(queue.size()) == h * w) return out;
  std::vector<std::uint8_t> seen = raw.valid;
  constexpr int dy[4] = {-1, 0, 0, 1};
  constexpr int dx[4] = {0, -1, 1, 0};
  while (!queue.empty()) {
    const int i = queue.front();
    queue.pop_front();
    const int y = i / w, x = i % w;
    for (int n = 0; n < 4; ++n) {
      const int ny = y + dy[n], nx = x + dx[n];
      if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
      const int j = ny * w + nx;
      if (seen[j]) continue;
      seen[j] = 1;
      out.values[j] = out.values[i];
      queue.push_back(j);
    }
  }
  std::fill(out.valid.begin(), out.valid.end(), 1);
  return out;
}

Tensor<double> depth_to_coords(const DepthMap& depth, const CameraIntrinsics& k) {
  k.validate();
  const int h = depth.height(), w = depth.width();
  Tensor<double> out({3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const double z = depth.values(0, v, u);
      if (!(z > 0) || !std::isfinite(z)) {
        fail(ErrorKind::data, fmt::format("nonpositive depth {} at ({}, {})", z, v, u));
      }
      out(0, v, u) = (u - k.cx) * z / k.fx;
      out(1, v, u) = (v - k.cy) * z / k.fy;
      out(2, v, u) = z;
    }
  }
  return out;
}

Tensor<double> surface_normals(const Tensor<double>& coords) {
  const int h = static_cast<int>(coords.dim(1)), w = static_cast<int>(coords.dim(2));
  if (h < 3 || w < 3) fail(ErrorKind::data, "surface normals need at least 3x3 pixels");
  Tensor<double> n(coords.shape());
  for (int v = 0; v < h; ++v) {
    const int cv = std::clamp(v, 1, h - 2);
    for (int u = 0; u < w; ++u) {
      const int cu = std::clamp(u, 1, w - 2);
      double du[3], dv[3], p[3];
      for (int c = 0; c < 3; ++c) {
        du[c] = coords(c, cv, cu + 1) - coords(c, cv, cu - 1);
        dv[c] = coords(c, cv + 1, cu) - coords(c, cv - 1, cu);
        p[c] = coords(c, cv, cu);
      }
      double nx = du[1] * dv[2] - du[2] * dv[1];
      double ny = du[2] * dv[0] - du[0] * dv[2];
      double nz = du[0] * dv[1] - du[1] * dv[0];
      const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
      if (len > 0) {
        nx /= len;
        ny /= len;
        nz /= len;
      } else {
        nx = 0;
        ny = 0;
        nz = -1;
      }
      if (nx * p[0] + ny * p[1] + nz * p[2] > 0) {
        nx = -nx;
        ny = -ny;
        nz = -nz;
      }
      n(0, v, u) = nx;
      n(1, v, u) = ny;
      n(2, v, u) = nz;
    }
  }
  return n;
}

Tensor<double> depth_to_hha_raw(const DepthMap& depth, const CameraIntrinsics& k,
                                const std::array<double, 3>& gravity) {
  const double gl = std::sqrt(gravity[0] * gravity[0] + gravity[1] * gravity[1] +
                              gravity[2] * gravity[2]);
  if (!(gl > 0)) fail(ErrorKind::data, "gravity vector must be nonzero");
  const double g[3] = {gravity[0] / gl, gravity[1] / gl, gravity[2] / gl};
  auto coords = depth_to_coords(depth, k);
  auto normals = surface_normals(coords);
  const int h = depth.height(), w = depth.width();
  Tensor<double> out(coords.shape());
  double lowest = std::numeric_limits<double>::infinity();
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const double up = -(coords(0, v, u) * g[0] + coords(1, v, u) * g[1] + coords(2, v, u) * g[2]);
      out(1, v, u) = up;
      lowest = std::min(lowest, up);
    }
  }
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      out(0, v, u) = 1.0 / coords(2, v, u);
      out(1, v, u) -= lowest;
      const double c = normals(0, v, u) * g[0] + normals(1, v, u) * g[1] + normals(2, v, u) * g[2];
      out(2, v, u) = std::acos(std::clamp(c, -1.0, 1.0));
    }
  }
  return out;
}

Tensor<double> depth_to_hha(const DepthMap& depth, const CameraIntrinsics& k,
                            const std::array<double, 3>& gravity) {
  auto out = depth_to_hha_raw(depth, k, gravity);
  const std::size_t plane = out.numel() / 3;
  for (std::size_t c = 0; c < 3; ++c) {
    double* p = out.data() + c * plane;
    const auto [lo, hi] = std::minmax_element(p, p + plane);
    const double a = *lo, range = *hi - *lo;
    for (std::size_t i = 0; i < plane; ++i) p[i] = range > 0 ? (p[i] - a) / range : 0.0;
  }
  return out;
}

Tensor<double> normalize_spatial(const Tensor<double>& s, NormalizeStats* stats, double eps) {
  if (s.rank() != 3) fail(ErrorKind::dimension, "normalize_spatial expects [C,h,w]");
  const std::size_t c = s.dim(0), plane = s.dim(1) * s.dim(2);
  Tensor<double> out(s.shape());
  NormalizeStats st;
  for (std::size_t k = 0; k < c; ++k) {
    const double* p = s.data() + k * plane;
    double mean = 0;
    for (std::size_t i = 0; i < plane; ++i) mean += p[i];
    mean /= static_cast<double>(plane);
    double var = 0;
    for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= static_cast<double>(plane);
    const double sd = std::max(std::sqrt(var), eps);
    double* q = out.data() + k * plane;
    for (std::size_t i = 0; i < plane; ++i) q[i] = (p[i] - mean) / sd;
    st.mean.push_back(mean);
    st.stddev.push_back(sd);
  }
  if (stats != nullptr) *stats = std::move(st);
  return out;
}

Tensor<double> denormalize_spatial(const Tensor<double>& s, const NormalizeStats& stats) {
  const std::size_t c = s.dim(0), plane = s.dim(1) * s.dim(2);
  if (stats.mean.size() != c) fail(ErrorKind::dimension, "normalize stats channel mismatch");
  Tensor<double> out(s.shape());
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < plane; ++i) {
      out[k * plane + i] = s[k * plane + i] * stats.stddev[k] + stats.mean[k];
    }
  }
  return out;
}

}  // namespace sconv

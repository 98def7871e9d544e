#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "oracles.hpp"
#include "sconv/geometry.hpp"

using namespace sconv;

namespace {

DepthMap plane_depth(int h, int w, double z) { return DepthMap::from_values(Tensor<double>({1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, z)); }

const CameraIntrinsics kCam{50.0, 40.0, 7.5, 5.5};

}  // namespace

TEST_CASE("sanitize_depth") {
  auto d = plane_depth(6, 7, 2.0);
  CHECK(sanitize_depth(d).values == d.values);

  Tensor<double> v({1, 5, 5}, 1.5);
  v(0, 2, 2) = 0.0;
  auto one = sanitize_depth(DepthMap::from_values(v));
  CHECK(one.values(0, 2, 2) == 1.5);
  CHECK(one.fully_valid());

  std::mt19937_64 rng(3);
  auto r = oracle::random_tensor({1, 9, 11}, rng, 0.5, 4.0);
  std::bernoulli_distribution hole(0.3);
  for (auto& x : r.values())
    if (hole(rng)) x = 0.0;
  r[0] = std::nan("");
  const auto raw = DepthMap::from_values(r);
  CHECK_FALSE(raw.fully_valid());
  const auto clean = sanitize_depth(raw);
  CHECK(clean.fully_valid());
  for (std::size_t i = 0; i < r.numel(); ++i)
    if (raw.valid[i]) CHECK(clean.values[i] == r[i]);
  CHECK(sanitize_depth(clean).values == clean.values);

  CHECK_THROWS_AS(sanitize_depth(DepthMap::from_values(Tensor<double>({1, 3, 3}))), Error);
}

TEST_CASE("depth_to_coords") {
  const CameraIntrinsics k{100, 100, 3, 2};
  auto d = plane_depth(5, 7, 2.5);
  auto c = depth_to_coords(d, k);
  CHECK(c(0, 2, 3) == 0.0);
  CHECK(c(1, 2, 3) == 0.0);
  CHECK(c(2, 2, 3) == 2.5);

  std::mt19937_64 rng(1);
  auto z = oracle::random_tensor({1, 5, 7}, rng, 0.5, 3.0);
  auto z2 = z;
  for (auto& v : z2.values()) v *= 2;
  const auto a = depth_to_coords(DepthMap::from_values(z), kCam);
  const auto b = depth_to_coords(DepthMap::from_values(z2), kCam);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(b[i] - 2 * a[i]) <= 1e-12);
  for (int t = 0; t < 10; ++t) {
    const int v = t % 5, u = (3 * t) % 7;
    CHECK(std::abs(a(0, v, u) - (u - kCam.cx) * z(0, v, u) / kCam.fx) <= 1e-12);
    CHECK(std::abs(a(1, v, u) - (v - kCam.cy) * z(0, v, u) / kCam.fy) <= 1e-12);
  }
  Tensor<double> bad({1, 2, 2}, 1.0);
  bad[1] = -1;
  DepthMap neg{bad, {1, 1, 1, 1}};
  CHECK_THROWS_AS(depth_to_coords(neg, kCam), Error);
}

TEST_CASE("HHA on a fronto-parallel plane") {
  const auto d = plane_depth(8, 9, 3.0);
  const auto raw = depth_to_hha_raw(d, kCam);
  for (std::size_t i = 0; i < 72; ++i) CHECK(std::abs(raw[2 * 72 + i] - std::numbers::pi / 2) <= 1e-12);
  const auto hha = depth_to_hha(d, kCam);
  for (auto v : hha.values()) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("HHA disparity decreases with depth") {
  Tensor<double> z({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) z[i] = 1.0 + 0.25 * static_cast<double>(i);
  const auto raw = depth_to_hha_raw(DepthMap::from_values(z), kCam);
  for (std::size_t i = 1; i < 16; ++i) CHECK(raw[i] < raw[i - 1]);
}

TEST_CASE("normals of a tilted plane match the analytic normal") {
  // Plane n.P = c with n = (0.3, -0.4, -0.866...) normalized.
  const double nx = 0.3, ny = -0.4, nz = -std::sqrt(1 - nx * nx - ny * ny), c = -3.0;
  const int h = 12, w = 14;
  Tensor<double> z({1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const double rx = (u - kCam.cx) / kCam.fx, ry = (v - kCam.cy) / kCam.fy;
      z(0, v, u) = c / (nx * rx + ny * ry + nz);
    }
  const auto n = surface_normals(depth_to_coords(DepthMap::from_values(z), kCam));
  const std::array<double, 3> g{0, -1, 0};
  const auto raw = depth_to_hha_raw(DepthMap::from_values(z), kCam, g);
  const double expected = std::acos(nx * g[0] + ny * g[1] + nz * g[2]);
  for (int v = 1; v < h - 1; ++v)
    for (int u = 1; u < w - 1; ++u) {
      CHECK(std::abs(n(0, v, u) - nx) <= 1e-9);
      CHECK(std::abs(n(2, v, u) - nz) <= 1e-9);
      CHECK(std::abs(raw(2, v, u) - expected) <= 1e-3);
    }
}

TEST_CASE("normalize_spatial") {
  std::mt19937_64 rng(7);
  auto s = oracle::random_tensor({3, 6, 5}, rng, -3, 8);
  for (std::size_t i = 0; i < 30; ++i) s[i] = 4.0;  // constant channel 0
  NormalizeStats st;
  const auto n = normalize_spatial(s, &st);
  for (std::size_t i = 0; i < 30; ++i) CHECK(n[i] == 0.0);
  for (std::size_t c = 1; c < 3; ++c) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < 30; ++i) mean += n[c * 30 + i];
    mean /= 30;
    for (std::size_t i = 0; i < 30; ++i) var += (n[c * 30 + i] - mean) * (n[c * 30 + i] - mean);
    var /= 30;
    CHECK(std::abs(mean) <= 1e-9);
    CHECK(std::abs(var - 1) <= 1e-6);
  }
  CHECK(max_abs_diff(normalize_spatial(n), n) <= 1e-6);
  CHECK(max_abs_diff(denormalize_spatial(n, st), s) <= 1e-9);
}

TEST_CASE("intrinsics file round trip and validation") {
  const auto path = std::filesystem::temp_directory_path() / "sconv_intrinsics.txt";
  kCam.save(path);
  const auto k = CameraIntrinsics::load(path);
  CHECK(k.fx == kCam.fx);
  CHECK(k.cy == kCam.cy);
  std::filesystem::remove(path);
  CHECK_THROWS_AS((CameraIntrinsics{0, 1, 0, 0}.validate()), Error);
}

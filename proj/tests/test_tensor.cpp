#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "sconv/tensor.hpp"

using namespace sconv;
namespace fs = std::filesystem;

TEST_CASE("tensor indexing is row-major") {
  Tensor<double> t({2, 3, 4});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(i);
  CHECK(t(1, 2, 3) == 23.0);
  CHECK(t(0, 1, 0) == 4.0);
  CHECK(shape_numel({2, 3, 4}) == 24);
  CHECK(shape_str({2, 3, 4}) == "[2,3,4]");
}

TEST_CASE("tensor data must match shape") {
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>(3)), Error);
  Tensor<double> t({2, 3});
  CHECK_THROWS_AS(t.reshaped({4, 2}), Error);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
}

TEST_CASE("check_finite reports numeric errors") {
  Tensor<double> t({3}, 1.0);
  CHECK_NOTHROW(check_finite(t, "t"));
  t[1] = std::nan("");
  try {
    check_finite(t, "t");
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numeric);
  }
}

TEST_CASE("SCT1 round trip is exact") {
  std::mt19937_64 rng(3);
  const auto dir = fs::temp_directory_path() / "sconv_test_tensor";
  fs::create_directories(dir);
  auto d = oracle::random_tensor({2, 5, 3}, rng);
  save_tensor(d, dir / "d.sct");
  CHECK(load_tensor<double>(dir / "d.sct") == d);

  auto f = d.cast<float>();
  save_tensor(f, dir / "f.sct");
  CHECK(load_tensor<float>(dir / "f.sct") == f);
  // f32 payload widened to f64 keeps every value.
  CHECK(load_tensor<double>(dir / "f.sct") == f.cast<double>());

  std::ofstream(dir / "bad.sct") << "NOPE";
  CHECK_THROWS_AS(load_tensor<double>(dir / "bad.sct"), Error);
  CHECK_THROWS_AS(load_tensor<double>(dir / "missing.sct"), Error);
  fs::remove_all(dir);
}

TEST_CASE("max_abs_diff") {
  Tensor<double> a({3}, 1.0), b({3}, 1.0);
  b[2] = -0.5;
  CHECK(max_abs_diff(a, b) == 1.5);
}

#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "sconv/tensor.hpp"

namespace sconv {

// A learnable tensor with its accumulated gradient.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool decay = true;
  // Per-tensor learning-rate multiplier applied by the optimizer.
  double lr_mult = 1.0;

  Param() = default;
  Param(std::string n, Shape shape, bool weight_decay = true)
      : name(std::move(n)), value(shape), grad(shape), decay(weight_decay) {}

  void zero_grad() { grad.fill(T(0)); }
  std::size_t numel() const { return value.numel(); }
};

// He-uniform: U(-b, b) with b = sqrt(6 / fan_in).
template <typename T>
void he_uniform(Tensor<T>& t, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
}

}  // namespace sconv

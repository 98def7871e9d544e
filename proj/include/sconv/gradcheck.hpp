#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sconv/tensor.hpp"

namespace sconv {

// One differentiable function packaged for central finite-difference
// checking. `loss` re-evaluates the scalar objective with the current
// contents of the registered tensors; `analytic` returns the hand-derived
// gradient of every group; `region` identifies the piecewise-smooth region
// (ReLU masks, bilinear cells) so perturbations that cross a kink can be
// discarded instead of producing a meaningless difference quotient.
struct GradCheckCase {
  std::string op;
  std::vector<std::pair<std::string, Tensor<double>*>> groups;
  std::function<double()> loss;
  std::function<std::map<std::string, Tensor<double>>()> analytic;
  std::function<std::uint64_t()> region;
  // Keeps whatever state the closures reference alive.
  std::shared_ptr<void> owner;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  // Entries sampled per group and trial; 0 checks every entry.
  std::size_t max_entries = 48;
  // Mutation harness: negate this group's analytic gradient before comparing.
  std::optional<std::string> flip_sign_group;
};

struct GroupResult {
  std::string op;
  std::string group;
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  bool passed = false;
};

// Relative error of a group: max |analytic - numeric| divided by the largest
// magnitude of either over the checked entries.
std::vector<GroupResult> run_gradcheck(GradCheckCase& c, const GradCheckOptions& opt,
                                       std::uint64_t seed);

// Registered operators, each constructible at a random draw.
std::vector<std::string> gradcheck_ops();
GradCheckCase make_gradcheck_case(const std::string& op, std::uint64_t seed);

// Hash helper for region signatures.
struct RegionHasher {
  std::uint64_t h = 1469598103934665603ULL;
  void add(std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ULL;
  }
};

}  // namespace sconv

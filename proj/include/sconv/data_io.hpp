#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "sconv/geometry.hpp"
#include "sconv/tensor.hpp"

namespace sconv {

inline constexpr int kIgnoreLabel = 255;

struct ManifestEntry {
  std::string rgb;
  std::string depth;
  std::string label;
  bool operator==(const ManifestEntry&) const = default;
};

// manifest.txt: header "classes=<n> ignore=255 intrinsics=<path>", then one
// tab-separated "rgb depth label" line per sample. Paths are relative to
// the manifest's directory.
struct DatasetManifest {
  std::filesystem::path root;
  std::string split;
  int num_classes = 0;
  int ignore_label = kIgnoreLabel;
  std::string intrinsics;
  std::vector<ManifestEntry> entries;

  std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
  CameraIntrinsics camera() const { return CameraIntrinsics::load(resolve(intrinsics)); }
  std::size_t size() const { return entries.size(); }
};

// Entries are sorted lexicographically; every referenced file must exist.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

struct Sample {
  Tensor<double> rgb;  // [3,h,w] in [0,1]
  DepthMap depth;      // meters, holes where the PNG stores 0
  LabelMap label;      // [h,w]
};

Sample load_sample(const DatasetManifest& m, std::size_t index);
void write_sample(const Sample& s, const std::filesystem::path& rgb,
                  const std::filesystem::path& depth, const std::filesystem::path& label);

// ---------------------------------------------------------------------------
// Synthetic RGBD scenes
// ---------------------------------------------------------------------------

// Class layout of the generated scenes:
//   0 wall plane, 1 protruding box with its own texture,
//   2 protruding box / 3 flush poster   (shared stripe texture),
//   4 recessed niche / 5 flush poster   (shared dot texture).
// Each confusable pair is separable only through depth.
struct SynthConfig {
  int height = 64;
  int width = 64;
  int train_scenes = 200;
  int val_scenes = 50;
  int num_classes = 6;
  int min_objects = 3;
  int max_objects = 5;
  int min_size = 10;
  int max_size = 24;
  std::vector<std::pair<int, int>> confusable_pairs = {{2, 3}, {4, 5}};
  double depth_noise = 0.005;  // meters, Gaussian
  double depth_margin = 0.4;   // minimum relief of non-flush objects
  double hole_fraction = 0.002;
  std::uint64_t seed = 0;
};

struct SynthDataset {
  DatasetManifest train;
  DatasetManifest val;
};

// Writes <out>/intrinsics.txt, <out>/{train,val}/manifest.txt and PNGs.
SynthDataset synth_generate(const SynthConfig& cfg, const std::filesystem::path& out);

// Renders one scene without touching the filesystem.
Sample synth_scene(const SynthConfig& cfg, std::uint64_t scene_seed);

CameraIntrinsics synth_intrinsics(const SynthConfig& cfg);

// Per-sample deterministic seed (splitmix64 of the inputs).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

}  // namespace sconv

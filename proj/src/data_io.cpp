#include "sconv/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "sconv/png_io.hpp"

namespace sconv {

namespace fs = std::filesystem;

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto split = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return split(split(split(a) ^ b) ^ c);
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::io, "cannot open manifest: " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  m.split = m.root.filename().string();
  std::string header;
  std::getline(is, header);
  std::istringstream hs(header);
  std::string tok;
  bool have_classes = false;
  while (hs >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) fail(ErrorKind::data, "bad manifest header token: " + tok);
    const auto key = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (key == "classes") {
      m.num_classes = std::stoi(val);
      have_classes = true;
    } else if (key == "ignore") {
      m.ignore_label = std::stoi(val);
    } else if (key == "intrinsics") {
      m.intrinsics = val;
    }
  }
  if (!have_classes || m.num_classes < 1) {
    fail(ErrorKind::data, "manifest header lacks classes=<n>: " + path.string());
  }
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    ManifestEntry e;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) fail(ErrorKind::data, "manifest line needs 3 tab-separated paths: " + line);
    e.rgb = line.substr(0, t1);
    e.depth = line.substr(t1 + 1, t2 - t1 - 1);
    e.label = line.substr(t2 + 1);
    for (const auto* p : {&e.rgb, &e.depth, &e.label}) {
      if (!fs::exists(m.resolve(*p))) fail(ErrorKind::io, "missing file: " + m.resolve(*p).string());
    }
    m.entries.push_back(std::move(e));
  }
  std::sort(m.entries.begin(), m.entries.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.rgb < b.rgb; });
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::io, "cannot write manifest: " + path.string());
  os << fmt::format("classes={} ignore={} intrinsics={}\n", m.num_classes, m.ignore_label,
                    m.intrinsics);
  for (const auto& e : m.entries) os << e.rgb << '\t' << e.depth << '\t' << e.label << '\n';
}

Sample load_sample(const DatasetManifest& m, std::size_t index) {
  if (index >= m.entries.size()) fail(ErrorKind::data, fmt::format("sample index {} out of range", index));
  const auto& e = m.entries[index];
  const auto rgb_path = m.resolve(e.rgb), depth_path = m.resolve(e.depth),
             label_path = m.resolve(e.label);
  const auto rgb = read_png(rgb_path);
  const auto depth = read_png(depth_path);
  const auto label = read_png(label_path);
  if (rgb.channels != 3 || rgb.bit_depth != 8) fail(ErrorKind::data, "expected 8-bit RGB: " + rgb_path.string());
  if (depth.channels != 1 || depth.bit_depth != 16) {
    fail(ErrorKind::data, "expected 16-bit grayscale depth: " + depth_path.string());
  }
  if (label.channels != 1 || label.bit_depth != 8) {
    fail(ErrorKind::data, "expected 8-bit grayscale labels: " + label_path.string());
  }
  if (rgb.width != depth.width || rgb.height != depth.height || rgb.width != label.width ||
      rgb.height != label.height) {
    fail(ErrorKind::data, "image extents differ between rgb/depth/label of " + e.rgb);
  }
  const std::size_t h = rgb.height, w = rgb.width, plane = h * w;
  Sample s;
  s.rgb = Tensor<double>({3, h, w});
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) s.rgb[c * plane + i] = rgb.samples[i * 3 + c] / 255.0;
  }
  Tensor<double> z({1, h, w});
  for (std::size_t i = 0; i < plane; ++i) z[i] = depth.samples[i] / 1000.0;
  s.depth = DepthMap::from_values(std::move(z));
  s.label = LabelMap({h, w});
  for (std::size_t i = 0; i < plane; ++i) {
    const int v = label.samples[i];
    if (v != m.ignore_label && v >= m.num_classes) {
      fail(ErrorKind::data, fmt::format("label {} >= classes {} in {}", v, m.num_classes, label_path.string()));
    }
    s.label[i] = v;
  }
  return s;
}

void write_sample(const Sample& s, const fs::path& rgb, const fs::path& depth,
                  const fs::path& label) {
  const int h = static_cast<int>(s.label.dim(0)), w = static_cast<int>(s.label.dim(1));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<std::uint8_t> px(plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      px[i * 3 + c] = static_cast<std::uint8_t>(
          std::lround(std::clamp(s.rgb[c * plane + i], 0.0, 1.0) * 255.0));
    }
  }
  write_png_rgb8(rgb, w, h, px);
  std::vector<std::uint16_t> dz(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    const double z = s.depth.valid[i] ? s.depth.values[i] : 0.0;
    dz[i] = static_cast<std::uint16_t>(std::clamp<long>(std::lround(z * 1000.0), 0, 65535));
  }
  write_png_gray16(depth, w, h, dz);
  std::vector<std::uint8_t> lb(plane);
  for (std::size_t i = 0; i < plane; ++i) lb[i] = static_cast<std::uint8_t>(s.label[i]);
  write_png_gray8(label, w, h, lb);
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

namespace {

struct Rgb {
  double r, g, b;
};

enum class Texture { wall, checker, stripes, dots };

struct TextureParams {
  Texture kind;
  Rgb a, b;
  double period;
  double angle;
  double phase_x, phase_y;
};

Rgb jitter(Rgb c, std::mt19937_64& rng, double amount) {
  std::uniform_real_distribution<double> u(-amount, amount);
  return {c.r + u(rng), c.g + u(rng), c.b + u(rng)};
}

TextureParams draw_texture(Texture kind, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  TextureParams t;
  t.kind = kind;
  t.angle = u01(rng) * std::numbers::pi;
  t.phase_x = u01(rng) * 8;
  t.phase_y = u01(rng) * 8;
  switch (kind) {
    case Texture::wall:
      t.a = jitter({0.78, 0.72, 0.62}, rng, 0.06);
      t.b = jitter({0.70, 0.66, 0.58}, rng, 0.06);
      t.period = 12 + 10 * u01(rng);
      break;
    case Texture::checker:
      t.a = jitter({0.80, 0.20, 0.20}, rng, 0.08);
      t.b = jitter({0.20, 0.25, 0.75}, rng, 0.08);
      t.period = 3 + 3 * u01(rng);
      break;
    case Texture::stripes:
      t.a = jitter({0.20, 0.65, 0.30}, rng, 0.08);
      t.b = jitter({0.90, 0.85, 0.25}, rng, 0.08);
      t.period = 3 + 3 * u01(rng);
      break;
    case Texture::dots:
      t.a = jitter({0.55, 0.25, 0.65}, rng, 0.08);
      t.b = jitter({0.25, 0.80, 0.80}, rng, 0.08);
      t.period = 4 + 3 * u01(rng);
      break;
  }
  return t;
}

Rgb shade(const TextureParams& t, double y, double x) {
  const double c = std::cos(t.angle), s = std::sin(t.angle);
  const double u = (c * x + s * y) / t.period + t.phase_x;
  const double v = (-s * x + c * y) / t.period + t.phase_y;
  double mix = 0;
  switch (t.kind) {
    case Texture::wall:
      mix = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * u) * std::cos(2 * std::numbers::pi * v);
      break;
    case Texture::checker:
      mix = (static_cast<long>(std::floor(u)) + static_cast<long>(std::floor(v))) % 2 == 0 ? 0.0 : 1.0;
      break;
    case Texture::stripes:
      mix = u - std::floor(u) < 0.5 ? 0.0 : 1.0;
      break;
    case Texture::dots: {
      const double fu = u - std::floor(u) - 0.5, fv = v - std::floor(v) - 0.5;
      mix = fu * fu + fv * fv < 0.09 ? 1.0 : 0.0;
      break;
    }
  }
  return {t.a.r + (t.b.r - t.a.r) * mix, t.a.g + (t.b.g - t.a.g) * mix,
          t.a.b + (t.b.b - t.a.b) * mix};
}

Texture class_texture(int cls) {
  switch (cls) {
    case 1: return Texture::checker;
    case 2:
    case 3: return Texture::stripes;
    case 4:
    case 5: return Texture::dots;
    default: return Texture::wall;
  }
}

struct Box {
  int y0, x0, y1, x1;  // half-open
  int cls;
};

bool overlaps(const Box& a, const Box& b, int gap) {
  return a.y0 < b.y1 + gap && b.y0 < a.y1 + gap && a.x0 < b.x1 + gap && b.x0 < a.x1 + gap;
}

}  // namespace

CameraIntrinsics synth_intrinsics(const SynthConfig& cfg) {
  return {static_cast<double>(cfg.width), static_cast<double>(cfg.width), (cfg.width - 1) / 2.0,
          (cfg.height - 1) / 2.0};
}

Sample synth_scene(const SynthConfig& cfg, std::uint64_t scene_seed) {
  std::mt19937_64 rng(scene_seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int h = cfg.height, w = cfg.width;
  const auto k = synth_intrinsics(cfg);

  // Wall plane z = z0 + tilt * Y in camera coordinates.
  const double z0 = 3.0 + u01(rng);
  const double tilt = (u01(rng) - 0.5) * 0.3;
  auto wall_depth = [&](double v) {
    // Solve z = z0 + tilt * (v - cy) z / fy for z.
    return z0 / (1.0 - tilt * (v - k.cy) / k.fy);
  };

  std::uniform_int_distribution<int> count(cfg.min_objects, cfg.max_objects);
  std::uniform_int_distribution<int> size(cfg.min_size, cfg.max_size);
  std::uniform_int_distribution<int> cls_dist(1, cfg.num_classes - 1);
  const int n_obj = count(rng);
  std::vector<Box> boxes;
  for (int n = 0; n < n_obj; ++n) {
    const int cls = cls_dist(rng);
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const int bh = size(rng), bw = size(rng);
      if (bh >= h || bw >= w) break;
      std::uniform_int_distribution<int> py(0, h - bh), px(0, w - bw);
      Box b{py(rng), px(rng), 0, 0, cls};
      b.y1 = b.y0 + bh;
      b.x1 = b.x0 + bw;
      if (std::none_of(boxes.begin(), boxes.end(), [&](const Box& o) { return overlaps(b, o, 2); })) {
        boxes.push_back(b);
        placed = true;
      }
    }
    if (!placed && static_cast<int>(boxes.size()) < cfg.min_objects) {
      fail(ErrorKind::generation,
           fmt::format("could not place {} objects in a {}x{} scene", cfg.min_objects, h, w));
    }
  }

  Sample s;
  const std::size_t hs = h, ws = w, plane = hs * ws;
  s.rgb = Tensor<double>({3, hs, ws});
  Tensor<double> z({1, hs, ws});
  s.label = LabelMap({hs, ws}, 0);

  const auto wall_tex = draw_texture(Texture::wall, rng);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto c = shade(wall_tex, y, x);
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      s.rgb[i] = c.r;
      s.rgb[plane + i] = c.g;
      s.rgb[2 * plane + i] = c.b;
      z[i] = wall_depth(y);
    }
  }
  for (const auto& b : boxes) {
    const auto tex = draw_texture(class_texture(b.cls), rng);
    const double relief = cfg.depth_margin + u01(rng) * 0.8;
    const double center_wall = wall_depth(0.5 * (b.y0 + b.y1 - 1));
    for (int y = b.y0; y < b.y1; ++y) {
      for (int x = b.x0; x < b.x1; ++x) {
        const auto c = shade(tex, y - b.y0, x - b.x0);
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        s.rgb[i] = c.r;
        s.rgb[plane + i] = c.g;
        s.rgb[2 * plane + i] = c.b;
        s.label[i] = b.cls;
        switch (b.cls) {
          case 1:
          case 2: z[i] = center_wall - relief; break;  // box face parallel to the image plane
          case 4: z[i] = wall_depth(y) + relief; break;
          default: z[i] = wall_depth(y); break;  // flush with the wall
        }
      }
    }
  }

  std::normal_distribution<double> pix_noise(0.0, 0.02), depth_noise(0.0, cfg.depth_noise);
  for (std::size_t i = 0; i < 3 * plane; ++i) s.rgb[i] = std::clamp(s.rgb[i] + pix_noise(rng), 0.0, 1.0);
  for (std::size_t i = 0; i < plane; ++i) {
    z[i] = std::max(0.001, z[i] + depth_noise(rng));
    if (u01(rng) < cfg.hole_fraction) z[i] = 0.0;
  }
  s.depth = DepthMap::from_values(std::move(z));
  return s;
}

SynthDataset synth_generate(const SynthConfig& cfg, const fs::path& out) {
  if (cfg.confusable_pairs.empty()) fail(ErrorKind::config, "synthetic data needs >= 1 confusable pair");
  if (cfg.num_classes != 6) {
    fail(ErrorKind::config, "the synthetic scene layout defines exactly 6 classes");
  }
  if (cfg.height < 16 || cfg.width < 16) fail(ErrorKind::config, "synthetic scenes must be >= 16x16");
  fs::create_directories(out);
  synth_intrinsics(cfg).save(out / "intrinsics.txt");
  SynthDataset ds;
  for (int split = 0; split < 2; ++split) {
    const std::string name = split == 0 ? "train" : "val";
    const int n = split == 0 ? cfg.train_scenes : cfg.val_scenes;
    const fs::path dir = out / name;
    fs::create_directories(dir);
    DatasetManifest m;
    m.root = dir;
    m.split = name;
    m.num_classes = cfg.num_classes;
    m.intrinsics = "../intrinsics.txt";
    for (int i = 0; i < n; ++i) {
      const auto sample = synth_scene(cfg, mix_seed(cfg.seed, split, i));
      ManifestEntry e{fmt::format("rgb_{:05d}.png", i), fmt::format("depth_{:05d}.png", i),
                      fmt::format("label_{:05d}.png", i)};
      write_sample(sample, dir / e.rgb, dir / e.depth, dir / e.label);
      m.entries.push_back(e);
    }
    save_manifest(m, dir / "manifest.txt");
    (split == 0 ? ds.train : ds.val) = m;
  }
  return ds;
}

}  // namespace sconv

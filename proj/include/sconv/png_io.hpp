#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace sconv {

// Decoded PNG: samples stored row-major, interleaved by channel.
struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;   // 1 (gray) or 3 (RGB); alpha is dropped
  int bit_depth = 8;  // 8 or 16
  std::vector<std::uint16_t> samples;
};

PngImage read_png(const std::filesystem::path& path);

void write_png_gray8(const std::filesystem::path& path, int width, int height,
                     const std::vector<std::uint8_t>& pixels);
void write_png_gray16(const std::filesystem::path& path, int width, int height,
                      const std::vector<std::uint16_t>& pixels);
void write_png_rgb8(const std::filesystem::path& path, int width, int height,
                    const std::vector<std::uint8_t>& interleaved);

}  // namespace sconv

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace condense {

struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;  // interleaved HWC
};

// Decodes to RGB (channels == 3) or grayscale (channels == 1).
Image8 read_png(const std::filesystem::path& path, int channels);
void write_png(const std::filesystem::path& path, const Image8& image);

}  // namespace condense

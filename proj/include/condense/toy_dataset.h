#pragma once

#include <cstdint>
#include <filesystem>
#include <random>

#include "condense/png_io.h"

namespace condense {

// Procedural 10-class RGB dataset: each class is a shape or texture family
// (disk, square, triangle, horizontal stripes, vertical stripes, checker,
// ring, cross, diagonal stripes, blobs) with a class-preferred hue, random
// placement, scale, background and pixel noise.
struct ToyDatasetSpec {
  int train_per_class = 500;
  int val_per_class = 100;
  int resolution = 32;
  std::uint64_t seed = 0;
};

inline constexpr int kToyClasses = 10;
const char* toy_class_name(int cls);

Image8 render_toy_image(int cls, int resolution, std::mt19937_64& rng);

// Writes <root>/{train,val}/<NN_name>/<i>.png.
void write_toy_dataset(const ToyDatasetSpec& spec, const std::filesystem::path& root);

}  // namespace condense

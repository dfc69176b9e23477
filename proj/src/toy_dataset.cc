#include "condense/toy_dataset.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace condense {

namespace fs = std::filesystem;

namespace {

constexpr std::array<const char*, kToyClasses> kNames = {
    "disk", "square", "triangle", "hstripes", "vstripes",
    "checker", "ring", "cross", "dstripes", "blobs"};

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
  const double c = v * s, x = c * (1 - std::abs(std::fmod(h, 2.0) - 1)), m = v - c;
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (auto& ch : rgb) ch += m;
  return rgb;
}

}  // namespace

const char* toy_class_name(int cls) { return kNames.at(cls); }

Image8 render_toy_image(int cls, int resolution, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = resolution;
  const double cx = (0.3 + 0.4 * u(rng)) * r, cy = (0.3 + 0.4 * u(rng)) * r;
  const double size = (0.2 + 0.15 * u(rng)) * r;
  const double period = (0.12 + 0.1 * u(rng)) * r;
  const double phase = u(rng) * 2 * std::numbers::pi;
  const auto fg = hsv_to_rgb(cls * 36.0 + (u(rng) - 0.5) * 80.0, 0.5 + 0.5 * u(rng),
                             0.6 + 0.4 * u(rng));
  const double grey = 0.1 + 0.8 * u(rng);
  const std::array<double, 3> bg{grey + 0.1 * (u(rng) - 0.5), grey + 0.1 * (u(rng) - 0.5),
                                 grey + 0.1 * (u(rng) - 0.5)};
  std::array<std::array<double, 2>, 3> blobs{};
  for (auto& b : blobs) b = {(0.15 + 0.7 * u(rng)) * r, (0.15 + 0.7 * u(rng)) * r};

  auto inside = [&](double x, double y) -> bool {
    const double dx = x - cx, dy = y - cy, d = std::hypot(dx, dy);
    const double w = 2 * std::numbers::pi / period;
    switch (cls) {
      case 0: return d < size;
      case 1: return std::max(std::abs(dx), std::abs(dy)) < 0.85 * size;
      case 2: return dy > -size && dy < size && std::abs(dx) < (dy + size) / 2;
      case 3: return std::sin(w * y + phase) > 0;
      case 4: return std::sin(w * x + phase) > 0;
      case 5: {
        const int p = std::max(2, static_cast<int>(period / 2));
        return ((static_cast<int>(x + phase) / p) + (static_cast<int>(y) / p)) % 2 == 0;
      }
      case 6: return std::abs(d - size) < 0.3 * size;
      case 7:
        return (std::abs(dx) < 0.3 * size && std::abs(dy) < size) ||
               (std::abs(dy) < 0.3 * size && std::abs(dx) < size);
      case 8: return std::sin(w * (x + y) / std::numbers::sqrt2 + phase) > 0;
      default:
        for (const auto& b : blobs) {
          if (std::hypot(x - b[0], y - b[1]) < 0.45 * size) return true;
        }
        return false;
    }
  };

  std::normal_distribution<double> noise(0.0, 0.05);
  Image8 img{resolution, resolution, 3, std::vector<std::uint8_t>(resolution * resolution * 3)};
  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      const bool on = inside(x + 0.5, y + 0.5);
      for (int c = 0; c < 3; ++c) {
        const double v = (on ? fg[c] : bg[c]) + noise(rng);
        img.pixels[(y * resolution + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255));
      }
    }
  }
  return img;
}

void write_toy_dataset(const ToyDatasetSpec& spec, const fs::path& root) {
  for (int split = 0; split < 2; ++split) {
    const int count = split == 0 ? spec.train_per_class : spec.val_per_class;
    const char* split_dir = split == 0 ? "train" : "val";
    for (int cls = 0; cls < kToyClasses; ++cls) {
      std::mt19937_64 rng(spec.seed * 1000003ull + split * 101ull + cls);
      char name[64];
      std::snprintf(name, sizeof(name), "%02d_%s", cls, kNames[cls]);
      const fs::path dir = root / split_dir / name;
      fs::create_directories(dir);
      for (int i = 0; i < count; ++i) {
        char file[32];
        std::snprintf(file, sizeof(file), "%05d.png", i);
        write_png(dir / file, render_toy_image(cls, spec.resolution, rng));
      }
    }
  }
}

}  // namespace condense

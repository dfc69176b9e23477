#pragma once

#include <random>

#include "condense/tensor.h"

namespace condense {

struct CropRect {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;

  int area() const { return height * width; }
  bool contains(int y, int x) const {
    return y >= top && y < top + height && x >= left && x < left + width;
  }
  bool operator==(const CropRect&) const = default;
};

// RandomResizedCrop geometry: area fraction in [scale_lo, scale_hi], aspect
// ratio (w/h) log-uniform in [ratio_lo, ratio_hi].
struct CropParams {
  double scale_lo = 0.08;
  double scale_hi = 1.0;
  double ratio_lo = 3.0 / 4.0;
  double ratio_hi = 4.0 / 3.0;

  bool operator==(const CropParams&) const = default;
};

void validate_crop_params(const CropParams& p);  // throws ConfigError

// Ten rejection-sampling attempts, then a ratio-clamped centre crop.
CropRect sample_resized_crop(int height, int width, const CropParams& params,
                             std::mt19937_64& rng);

// Bilinear resize (half-pixel centres, edge clamped) of `rect` of one C x H x W
// image into C x out_h x out_w, mirrored horizontally when `hflip`. Only
// pixels inside `rect` are read.
template <typename T>
void resized_crop(const T* src, int channels, int height, int width, const CropRect& rect,
                  bool hflip, int out_h, int out_w, T* dst);

// Adjoint of resized_crop: accumulates into grad_src (inside `rect` only).
template <typename T>
void resized_crop_backward(const T* grad_dst, int channels, int height, int width,
                           const CropRect& rect, bool hflip, int out_h, int out_w, T* grad_src);

// Box covering a (1 - lambda) fraction of the image, centre uniform, clipped.
CropRect cutmix_box(int height, int width, double lambda, std::mt19937_64& rng);

// Draw from Beta(alpha, alpha).
double sample_beta(double alpha, std::mt19937_64& rng);

}  // namespace condense

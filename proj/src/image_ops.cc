#include "condense/image_ops.h"

#include <algorithm>
#include <boost/random/beta_distribution.hpp>
#include <cmath>

#include "condense/errors.h"

namespace condense {

void validate_crop_params(const CropParams& p) {
  if (!(p.scale_lo > 0.0 && p.scale_lo <= p.scale_hi && p.scale_hi <= 1.0)) {
    throw ConfigError("crop scale range must satisfy 0 < lo <= hi <= 1");
  }
  if (!(p.ratio_lo > 0.0 && p.ratio_lo <= p.ratio_hi)) {
    throw ConfigError("crop ratio range must satisfy 0 < lo <= hi");
  }
}

CropRect sample_resized_crop(int height, int width, const CropParams& params,
                             std::mt19937_64& rng) {
  const double area = static_cast<double>(height) * width;
  std::uniform_real_distribution<double> scale(params.scale_lo, params.scale_hi);
  std::uniform_real_distribution<double> log_ratio(std::log(params.ratio_lo),
                                                   std::log(params.ratio_hi));
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * scale(rng);
    const double aspect = std::exp(log_ratio(rng));
    const int w = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / aspect)));
    if (w > 0 && w <= width && h > 0 && h <= height) {
      std::uniform_int_distribution<int> top(0, height - h);
      std::uniform_int_distribution<int> left(0, width - w);
      const int t = top(rng);
      const int l = left(rng);
      return {t, l, h, w};
    }
  }
  const double in_ratio = static_cast<double>(width) / height;
  int w = width, h = height;
  if (in_ratio < params.ratio_lo) {
    h = static_cast<int>(std::lround(w / params.ratio_lo));
  } else if (in_ratio > params.ratio_hi) {
    w = static_cast<int>(std::lround(h * params.ratio_hi));
  }
  return {(height - h) / 2, (width - w) / 2, h, w};
}

namespace {

struct Tap {
  int i0, i1;
  double frac;
};

// Source taps along one axis for half-pixel-centre bilinear resampling.
std::vector<Tap> taps(int src_len, int dst_len) {
  std::vector<Tap> out(dst_len);
  const double scale = static_cast<double>(src_len) / dst_len;
  for (int d = 0; d < dst_len; ++d) {
    double s = (d + 0.5) * scale - 0.5;
    if (s < 0) s = 0;
    int i0 = static_cast<int>(s);
    if (i0 > src_len - 1) i0 = src_len - 1;
    const int i1 = i0 < src_len - 1 ? i0 + 1 : i0;
    out[d] = {i0, i1, s - i0};
  }
  return out;
}

}  // namespace

template <typename T>
void resized_crop(const T* src, int channels, int height, int width, const CropRect& rect,
                  bool hflip, int out_h, int out_w, T* dst) {
  const auto ty = taps(rect.height, out_h);
  const auto tx = taps(rect.width, out_w);
  for (int c = 0; c < channels; ++c) {
    const T* plane = src + static_cast<std::size_t>(c) * height * width;
    T* out = dst + static_cast<std::size_t>(c) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const T* r0 = plane + static_cast<std::size_t>(rect.top + ty[y].i0) * width + rect.left;
      const T* r1 = plane + static_cast<std::size_t>(rect.top + ty[y].i1) * width + rect.left;
      const T fy = static_cast<T>(ty[y].frac);
      for (int x = 0; x < out_w; ++x) {
        const Tap& t = tx[x];
        const T fx = static_cast<T>(t.frac);
        const T top = r0[t.i0] + (r0[t.i1] - r0[t.i0]) * fx;
        const T bot = r1[t.i0] + (r1[t.i1] - r1[t.i0]) * fx;
        const int ox = hflip ? out_w - 1 - x : x;
        out[y * out_w + ox] = top + (bot - top) * fy;
      }
    }
  }
}

template <typename T>
void resized_crop_backward(const T* grad_dst, int channels, int height, int width,
                           const CropRect& rect, bool hflip, int out_h, int out_w, T* grad_src) {
  const auto ty = taps(rect.height, out_h);
  const auto tx = taps(rect.width, out_w);
  for (int c = 0; c < channels; ++c) {
    T* plane = grad_src + static_cast<std::size_t>(c) * height * width;
    const T* g = grad_dst + static_cast<std::size_t>(c) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      T* r0 = plane + static_cast<std::size_t>(rect.top + ty[y].i0) * width + rect.left;
      T* r1 = plane + static_cast<std::size_t>(rect.top + ty[y].i1) * width + rect.left;
      const T fy = static_cast<T>(ty[y].frac);
      for (int x = 0; x < out_w; ++x) {
        const Tap& t = tx[x];
        const T fx = static_cast<T>(t.frac);
        const T v = g[y * out_w + (hflip ? out_w - 1 - x : x)];
        const T vt = v * (T(1) - fy), vb = v * fy;
        r0[t.i0] += vt * (T(1) - fx);
        r0[t.i1] += vt * fx;
        r1[t.i0] += vb * (T(1) - fx);
        r1[t.i1] += vb * fx;
      }
    }
  }
}

CropRect cutmix_box(int height, int width, double lambda, std::mt19937_64& rng) {
  const double cut = std::sqrt(std::clamp(1.0 - lambda, 0.0, 1.0));
  const int cut_h = static_cast<int>(height * cut);
  const int cut_w = static_cast<int>(width * cut);
  std::uniform_int_distribution<int> cy(0, height - 1), cx(0, width - 1);
  const int y = cy(rng), x = cx(rng);
  const int y0 = std::clamp(y - cut_h / 2, 0, height), y1 = std::clamp(y + cut_h / 2, 0, height);
  const int x0 = std::clamp(x - cut_w / 2, 0, width), x1 = std::clamp(x + cut_w / 2, 0, width);
  return {y0, x0, y1 - y0, x1 - x0};
}

double sample_beta(double alpha, std::mt19937_64& rng) {
  boost::random::beta_distribution<double> beta(alpha, alpha);
  return beta(rng);
}

template void resized_crop<float>(const float*, int, int, int, const CropRect&, bool, int, int,
                                  float*);
template void resized_crop<double>(const double*, int, int, int, const CropRect&, bool, int, int,
                                   double*);
template void resized_crop_backward<float>(const float*, int, int, int, const CropRect&, bool, int,
                                           int, float*);
template void resized_crop_backward<double>(const double*, int, int, int, const CropRect&, bool,
                                            int, int, double*);

}  // namespace condense

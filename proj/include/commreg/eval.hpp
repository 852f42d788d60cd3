#pragma once

// Registration accuracy (mean landmark distance after warping), end-point
// error against ground truth, and the cross-modality similarity measures
// used by the baselines: NCC, SSIM and a Canny edge detector.

#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "commreg/core.hpp"
#include "commreg/field.hpp"
#include "commreg/synthdata.hpp"

namespace commreg {

/// Mean over pairs of |warp_landmark_inverse(field, a) - b|.
inline double registration_accuracy(const DeformationField& field, const LandmarkPairSet& landmarks,
                                    std::size_t first = 0, std::size_t last = std::numeric_limits<std::size_t>::max()) {
  last = std::min(last, landmarks.size());
  detail::require(first < last, "registration_accuracy needs a nonempty landmark set");
  double sum = 0.0;
  for (std::size_t i = first; i < last; ++i) {
    const auto& p = landmarks.pairs[i];
    sum += distance(warp_landmark_inverse(field, p.a), p.b);
  }
  return sum / static_cast<double>(last - first);
}

/// Mean per-pixel |field - gt|.
inline double endpoint_error(const DeformationField& field, const DeformationField& gt) {
  detail::require(field.height() == gt.height() && field.width() == gt.width(),
                  "endpoint_error: fields differ in shape");
  return torch::sqrt((field.tensor() - gt.tensor()).pow(2).sum(0)).mean().item<double>();
}

// ---------------------------------------------------------------------------
// Similarity measures. Tensor forms are differentiable and batched
// ([N,C,H,W] -> [N]); Image forms evaluate in float64.

/// Pearson correlation per sample over all pixels and channels.
inline torch::Tensor ncc(const torch::Tensor& x, const torch::Tensor& y, double eps = 1e-8) {
  detail::require(x.sizes() == y.sizes() && x.dim() == 4, "ncc: inputs must share a [N,C,H,W] shape");
  auto xf = x.flatten(1), yf = y.flatten(1);
  auto xc = xf - xf.mean(1, true), yc = yf - yf.mean(1, true);
  auto num = (xc * yc).sum(1);
  auto den = torch::sqrt((xc * xc).sum(1) * (yc * yc).sum(1) + eps);
  return num / den;
}

inline double ncc(const Image& x, const Image& y) {
  detail::require(x.tensor().sizes() == y.tensor().sizes(), "ncc: images differ in shape");
  auto constant = [](const torch::Tensor& t) { return t.max().item<double>() == t.min().item<double>(); };
  if (constant(x.tensor()) || constant(y.tensor())) throw InputError("ncc: degenerate input with zero variance");
  auto xc = x.tensor() - x.tensor().mean(), yc = y.tensor() - y.tensor().mean();
  const double vx = (xc * xc).sum().item<double>(), vy = (yc * yc).sum().item<double>();
  return (xc * yc).sum().item<double>() / std::sqrt(vx * vy);
}

struct SsimOptions {
  int64_t window = 7;
  double c1 = 0.01 * 0.01;  // (K1 * L)^2 with unit dynamic range
  double c2 = 0.03 * 0.03;
};

/// Mean local SSIM with a uniform window over fully-inside positions.
inline torch::Tensor ssim(const torch::Tensor& x, const torch::Tensor& y, const SsimOptions& opt = {}) {
  detail::require(x.sizes() == y.sizes() && x.dim() == 4, "ssim: inputs must share a [N,C,H,W] shape");
  detail::require(x.size(2) >= opt.window && x.size(3) >= opt.window, "ssim: image smaller than window");
  auto pool = [&](const torch::Tensor& t) { return torch::avg_pool2d(t, opt.window, 1); };
  auto mx = pool(x), my = pool(y);
  auto vx = pool(x * x) - mx * mx, vy = pool(y * y) - my * my, cxy = pool(x * y) - mx * my;
  auto map = ((2 * mx * my + opt.c1) * (2 * cxy + opt.c2)) / ((mx * mx + my * my + opt.c1) * (vx + vy + opt.c2));
  return map.flatten(1).mean(1);
}

inline double ssim(const Image& x, const Image& y, const SsimOptions& opt = {}) {
  detail::require(x.tensor().sizes() == y.tensor().sizes(), "ssim: images differ in shape");
  detail::require(x.channels() == 1, "ssim: expects single-channel images");
  return ssim(x.tensor().unsqueeze(0), y.tensor().unsqueeze(0), opt).item<double>();
}

// ---------------------------------------------------------------------------
// Canny: Gaussian smoothing (sigma 1.4), Sobel gradients, non-maximum
// suppression along the quantized gradient direction, hysteresis on the
// gradient magnitude (weak > low, strong > high, 8-connected).

struct CannyOptions {
  double sigma = 1.4;
};

namespace detail {

inline int64_t reflect101(int64_t i, int64_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

inline torch::Tensor gaussian_blur(const torch::Tensor& img, double sigma) {
  const auto radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int64_t i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    total += k[i + radius];
  }
  for (auto& v : k) v /= total;
  const int64_t h = img.size(0), w = img.size(1);
  auto tmp = torch::zeros_like(img), out = torch::zeros_like(img);
  auto src = img.accessor<double, 2>();
  auto t = tmp.accessor<double, 2>();
  auto o = out.accessor<double, 2>();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int64_t i = -radius; i <= radius; ++i) acc += k[i + radius] * src[y][reflect101(x + i, w)];
      t[y][x] = acc;
    }
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int64_t i = -radius; i <= radius; ++i) acc += k[i + radius] * t[reflect101(y + i, h)][x];
      o[y][x] = acc;
    }
  return out;
}

}  // namespace detail

/// Binary edge map (values 0/1) of a single-channel image.
inline Image canny_edges(const Image& image, double low, double high, const CannyOptions& opt = {}) {
  detail::require(image.channels() == 1, "canny_edges: expects a single-channel image");
  detail::require(low >= 0.0 && low <= high, "canny_edges: thresholds must satisfy 0 <= low <= high");
  const int64_t h = image.height(), w = image.width();
  const auto smooth = detail::gaussian_blur(image.tensor()[0].contiguous(), opt.sigma);
  auto s = smooth.accessor<double, 2>();
  auto at = [&](int64_t y, int64_t x) { return s[detail::reflect101(y, h)][detail::reflect101(x, w)]; };

  std::vector<double> mag(h * w), gxs(h * w), gys(h * w);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const double gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
      const double gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
      gxs[y * w + x] = gx;
      gys[y * w + x] = gy;
      mag[y * w + x] = std::hypot(gx, gy);
    }
  }
  auto m = [&](int64_t y, int64_t x) {
    return (y < 0 || y >= h || x < 0 || x >= w) ? 0.0 : mag[y * w + x];
  };

  // 0 = suppressed, 1 = weak, 2 = strong
  std::vector<uint8_t> state(h * w, 0);
  const double tan22 = std::tan(22.5 * 3.14159265358979323846 / 180.0);
  const double tan67 = std::tan(67.5 * 3.14159265358979323846 / 180.0);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const double v = mag[y * w + x];
      if (v <= low) continue;
      const double ax = std::abs(gxs[y * w + x]), ay = std::abs(gys[y * w + x]);
      bool keep;
      // Ties: the earlier neighbour must be strictly smaller, except on
      // diagonals where both must be.
      if (ay < ax * tan22) {
        keep = v > m(y, x - 1) && v >= m(y, x + 1);
      } else if (ay > ax * tan67) {
        keep = v > m(y - 1, x) && v >= m(y + 1, x);
      } else {
        const int64_t sgn = (gxs[y * w + x] * gys[y * w + x] < 0) ? -1 : 1;
        keep = v > m(y - 1, x - sgn) && v > m(y + 1, x + sgn);
      }
      if (keep) state[y * w + x] = v > high ? 2 : 1;
    }
  }

  auto out = torch::zeros({1, h, w}, torch::kFloat64);
  auto o = out.accessor<double, 3>();
  std::deque<int64_t> queue;
  for (int64_t i = 0; i < h * w; ++i) {
    if (state[i] == 2) {
      queue.push_back(i);
      o[0][i / w][i % w] = 1.0;
    }
  }
  while (!queue.empty()) {
    const int64_t i = queue.front();
    queue.pop_front();
    const int64_t y = i / w, x = i % w;
    for (int64_t dy = -1; dy <= 1; ++dy) {
      for (int64_t dx = -1; dx <= 1; ++dx) {
        const int64_t yy = y + dy, xx = x + dx;
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        const int64_t j = yy * w + xx;
        if (state[j] == 1 && o[0][yy][xx] == 0.0) {
          o[0][yy][xx] = 1.0;
          queue.push_back(j);
        }
      }
    }
  }
  return Image(out);
}

/// Canny thresholds used by the edge-based baselines, relative to the
/// Sobel magnitude of a [0,1] image.
struct EdgeBaselineOptions {
  double low = 0.1;
  double high = 0.3;
  double blur_sigma = 1.0;
};

/// Canny edges blurred with a Gaussian so that they carry usable gradients.
inline Image soft_edges(const Image& image, const EdgeBaselineOptions& opt = {}) {
  auto gray = image.channels() == 1 ? image.tensor() : image.tensor().mean(0, true);
  const auto edges = canny_edges(Image(gray), opt.low, opt.high);
  return Image(detail::gaussian_blur(edges.tensor()[0].contiguous(), opt.blur_sigma).unsqueeze(0));
}

// ---------------------------------------------------------------------------
// Reports.

struct SampleAccuracy {
  std::optional<double> salient_error;
  std::optional<double> full_error;
  std::optional<double> epe;
  std::size_t salient_count = 0;
  std::size_t general_count = 0;
};

struct AccuracyReport {
  std::string method;
  std::vector<SampleAccuracy> samples;

  static std::optional<double> mean_of(const std::vector<SampleAccuracy>& s,
                                       std::optional<double> SampleAccuracy::*member) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& x : s) {
      if ((x.*member).has_value()) {
        sum += *(x.*member);
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
  }

  std::optional<double> mean_salient() const { return mean_of(samples, &SampleAccuracy::salient_error); }
  std::optional<double> mean_full() const { return mean_of(samples, &SampleAccuracy::full_error); }
  std::optional<double> mean_epe() const { return mean_of(samples, &SampleAccuracy::epe); }
};

inline SampleAccuracy evaluate_sample(const DeformationField& field, const PairedSample& sample) {
  SampleAccuracy acc;
  if (sample.landmarks && !sample.landmarks->empty()) {
    const auto& lm = *sample.landmarks;
    acc.full_error = registration_accuracy(field, lm);
    acc.salient_count = lm.salient_count;
    acc.general_count = lm.size() - lm.salient_count;
    if (lm.salient_count > 0) acc.salient_error = registration_accuracy(field, lm, 0, lm.salient_count);
  }
  if (sample.gt_field) acc.epe = endpoint_error(field, *sample.gt_field);
  return acc;
}

}  // namespace commreg

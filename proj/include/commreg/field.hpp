#pragma once

// Differentiable backward warping, approximate landmark inversion, flow
// color coding and field serialization.

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "commreg/core.hpp"

namespace commreg {
namespace detail {

// Bilinear weights and clipped corner lookups for one sample location.
// Corners outside the raster read as zero.
template <typename Scalar>
struct BilinearCell {
  int64_t y0, x0;
  Scalar wy, wx;

  BilinearCell(Scalar py, Scalar px)
      : y0(static_cast<int64_t>(std::floor(py))),
        x0(static_cast<int64_t>(std::floor(px))),
        wy(py - std::floor(py)),
        wx(px - std::floor(px)) {}

  static bool inside(int64_t y, int64_t x, int64_t h, int64_t w) {
    return y >= 0 && y < h && x >= 0 && x < w;
  }
};

template <typename Scalar>
void resample_forward_kernel(const torch::Tensor& source, const torch::Tensor& field,
                             torch::Tensor& out) {
  auto src = source.accessor<Scalar, 4>();
  auto phi = field.accessor<Scalar, 4>();
  auto dst = out.accessor<Scalar, 4>();
  const int64_t n = source.size(0), c = source.size(1), h = source.size(2), w = source.size(3);
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const Scalar py = static_cast<Scalar>(y) + phi[b][0][y][x];
        const Scalar px = static_cast<Scalar>(x) + phi[b][1][y][x];
        if (!std::isfinite(static_cast<double>(py)) || !std::isfinite(static_cast<double>(px))) {
          for (int64_t k = 0; k < c; ++k) dst[b][k][y][x] = std::numeric_limits<Scalar>::quiet_NaN();
          continue;
        }
        const BilinearCell<Scalar> cell(py, px);
        const std::array<Scalar, 4> weight = {(1 - cell.wy) * (1 - cell.wx), (1 - cell.wy) * cell.wx,
                                              cell.wy * (1 - cell.wx), cell.wy * cell.wx};
        for (int64_t k = 0; k < c; ++k) {
          Scalar acc = 0;
          for (int corner = 0; corner < 4; ++corner) {
            const int64_t yy = cell.y0 + corner / 2, xx = cell.x0 + corner % 2;
            if (BilinearCell<Scalar>::inside(yy, xx, h, w)) acc += weight[corner] * src[b][k][yy][xx];
          }
          dst[b][k][y][x] = acc;
        }
      }
    }
  }
}

template <typename Scalar>
void resample_backward_kernel(const torch::Tensor& grad_out, const torch::Tensor& source,
                              const torch::Tensor& field, torch::Tensor& grad_source,
                              torch::Tensor& grad_field) {
  auto g = grad_out.accessor<Scalar, 4>();
  auto src = source.accessor<Scalar, 4>();
  auto phi = field.accessor<Scalar, 4>();
  auto gs = grad_source.accessor<Scalar, 4>();
  auto gf = grad_field.accessor<Scalar, 4>();
  const int64_t n = source.size(0), c = source.size(1), h = source.size(2), w = source.size(3);
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const Scalar py = static_cast<Scalar>(y) + phi[b][0][y][x];
        const Scalar px = static_cast<Scalar>(x) + phi[b][1][y][x];
        if (!std::isfinite(static_cast<double>(py)) || !std::isfinite(static_cast<double>(px))) continue;
        const BilinearCell<Scalar> cell(py, px);
        const std::array<Scalar, 4> weight = {(1 - cell.wy) * (1 - cell.wx), (1 - cell.wy) * cell.wx,
                                              cell.wy * (1 - cell.wx), cell.wy * cell.wx};
        Scalar d_py = 0, d_px = 0;
        for (int64_t k = 0; k < c; ++k) {
          std::array<Scalar, 4> v{};
          for (int corner = 0; corner < 4; ++corner) {
            const int64_t yy = cell.y0 + corner / 2, xx = cell.x0 + corner % 2;
            if (BilinearCell<Scalar>::inside(yy, xx, h, w)) {
              v[corner] = src[b][k][yy][xx];
              gs[b][k][yy][xx] += g[b][k][y][x] * weight[corner];
            }
          }
          d_py += g[b][k][y][x] * ((1 - cell.wx) * (v[2] - v[0]) + cell.wx * (v[3] - v[1]));
          d_px += g[b][k][y][x] * ((1 - cell.wy) * (v[1] - v[0]) + cell.wy * (v[3] - v[2]));
        }
        gf[b][0][y][x] = d_py;
        gf[b][1][y][x] = d_px;
      }
    }
  }
}

struct BilinearResampleFunction : torch::autograd::Function<BilinearResampleFunction> {
  static torch::Tensor forward(torch::autograd::AutogradContext* ctx, torch::Tensor source,
                               torch::Tensor field) {
    source = source.contiguous();
    field = field.contiguous();
    ctx->save_for_backward({source, field});
    auto out = torch::empty_like(source);
    AT_DISPATCH_FLOATING_TYPES(source.scalar_type(), "resample_forward", [&] {
      resample_forward_kernel<scalar_t>(source, field, out);
    });
    return out;
  }

  static torch::autograd::tensor_list backward(torch::autograd::AutogradContext* ctx,
                                               torch::autograd::tensor_list grad_outputs) {
    auto saved = ctx->get_saved_variables();
    const auto& source = saved[0];
    const auto& field = saved[1];
    auto grad_out = grad_outputs[0].contiguous();
    auto grad_source = torch::zeros_like(source);
    auto grad_field = torch::zeros_like(field);
    AT_DISPATCH_FLOATING_TYPES(source.scalar_type(), "resample_backward", [&] {
      resample_backward_kernel<scalar_t>(grad_out, source, field, grad_source, grad_field);
    });
    return {grad_source, grad_field};
  }
};

}  // namespace detail

/// Batched backward warp: out[n,:,v] = source[n,:,v + field[n,:,v]].
///
/// `source` is [N,C,H,W], `field` is [N,2,H,W] in pixels (dy, dx). Bilinear
/// interpolation; each corner outside the raster contributes zero.
/// Differentiable with respect to both arguments.
inline torch::Tensor resample(const torch::Tensor& source, const torch::Tensor& field) {
  detail::require(source.dim() == 4 && field.dim() == 4 && field.size(1) == 2,
                  "resample expects source [N,C,H,W] and field [N,2,H,W], got " +
                      detail::shape_string(source) + " and " + detail::shape_string(field));
  detail::require(source.size(0) == field.size(0) && source.size(2) == field.size(2) &&
                      source.size(3) == field.size(3),
                  "resample: source " + detail::shape_string(source) + " and field " +
                      detail::shape_string(field) + " disagree in batch or spatial size");
  auto common = source.scalar_type();
  return detail::BilinearResampleFunction::apply(source, field.to(common));
}

inline Image resample(const Image& source, const DeformationField& field) {
  detail::require(source.height() == field.height() && source.width() == field.width(),
                  "resample: image is " + std::to_string(source.height()) + "x" +
                      std::to_string(source.width()) + " but field is " +
                      std::to_string(field.height()) + "x" + std::to_string(field.width()));
  torch::NoGradGuard no_grad;
  auto out = resample(source.tensor().unsqueeze(0), field.tensor().unsqueeze(0));
  return Image(out.squeeze(0));
}

/// Grid location v minimizing |v + field(v) - p|; ties go to the smallest
/// (row, col). Maps a source-frame point to where its content lands after
/// registration.
inline Point2 warp_landmark_inverse(const DeformationField& field, const Point2& p) {
  auto phi = field.tensor().accessor<double, 3>();
  double best = std::numeric_limits<double>::infinity();
  Point2 arg{};
  for (int64_t y = 0; y < field.height(); ++y) {
    for (int64_t x = 0; x < field.width(); ++x) {
      const double ey = static_cast<double>(y) + phi[0][y][x] - p.y;
      const double ex = static_cast<double>(x) + phi[1][y][x] - p.x;
      const double d = ey * ey + ex * ex;
      if (d < best) {
        best = d;
        arg = {static_cast<double>(x), static_cast<double>(y)};
      }
    }
  }
  return arg;
}

// ---------------------------------------------------------------------------
// Flow color coding (Middlebury color wheel).

namespace detail {

inline std::vector<std::array<double, 3>> make_color_wheel() {
  constexpr int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
  std::vector<std::array<double, 3>> wheel;
  wheel.reserve(RY + YG + GC + CB + BM + MR);
  // Integer ramps as in the reference implementation.
  auto ramp = [](int i, int n) { return static_cast<double>(255 * i / n); };
  for (int i = 0; i < RY; ++i) wheel.push_back({255.0, ramp(i, RY), 0.0});
  for (int i = 0; i < YG; ++i) wheel.push_back({255.0 - ramp(i, YG), 255.0, 0.0});
  for (int i = 0; i < GC; ++i) wheel.push_back({0.0, 255.0, ramp(i, GC)});
  for (int i = 0; i < CB; ++i) wheel.push_back({0.0, 255.0 - ramp(i, CB), 255.0});
  for (int i = 0; i < BM; ++i) wheel.push_back({ramp(i, BM), 0.0, 255.0});
  for (int i = 0; i < MR; ++i) wheel.push_back({255.0, 0.0, 255.0 - ramp(i, MR)});
  return wheel;
}

}  // namespace detail

/// RGB rendering of a field: hue encodes direction, saturation encodes
/// magnitude relative to `cap` (the field's own max magnitude when cap <= 0).
/// Zero vectors render white.
inline Image visualize_field(const DeformationField& field, double cap = 0.0) {
  static const auto wheel = detail::make_color_wheel();
  const auto ncols = static_cast<int64_t>(wheel.size());
  const double scale = cap > 0.0 ? cap : field.max_magnitude();
  const int64_t h = field.height(), w = field.width();
  auto out = torch::empty({3, h, w}, torch::kFloat64);
  auto rgb = out.accessor<double, 3>();
  auto phi = field.tensor().accessor<double, 3>();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const double u = scale > 0.0 ? phi[1][y][x] / scale : 0.0;
      const double v = scale > 0.0 ? phi[0][y][x] / scale : 0.0;
      const double rad = std::sqrt(u * u + v * v);
      const double angle = std::atan2(-v, -u) / std::numbers::pi;
      const double fk = (angle + 1.0) / 2.0 * static_cast<double>(ncols - 1);
      const auto k0 = static_cast<int64_t>(std::floor(fk));
      const int64_t k1 = (k0 + 1) % ncols;
      const double f = fk - static_cast<double>(k0);
      for (int ch = 0; ch < 3; ++ch) {
        const double col0 = wheel[k0][ch] / 255.0, col1 = wheel[k1][ch] / 255.0;
        double col = (1.0 - f) * col0 + f * col1;
        col = rad <= 1.0 ? 1.0 - rad * (1.0 - col) : col * 0.75;
        rgb[ch][y][x] = col;
      }
    }
  }
  return Image(out);
}

// ---------------------------------------------------------------------------
// Field serialization: three header lines (height, width, convention tag)
// followed by one "dy dx" row per pixel in row-major order.

inline void write_field(const std::filesystem::path& path, const DeformationField& field) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << field.height() << '\n' << field.width() << '\n' << DeformationField::kConvention << '\n';
  auto phi = field.tensor().accessor<double, 3>();
  char buf[64];
  for (int64_t y = 0; y < field.height(); ++y) {
    for (int64_t x = 0; x < field.width(); ++x) {
      std::snprintf(buf, sizeof buf, "%.17g %.17g\n", phi[0][y][x], phi[1][y][x]);
      os << buf;
    }
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

inline DeformationField read_field(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("missing field file " + path.string());
  int64_t h = 0, w = 0;
  std::string tag;
  if (!(is >> h >> w >> tag)) throw ParseError(path.string() + ": malformed field header");
  if (tag != DeformationField::kConvention) {
    throw ParseError(path.string() + ": unsupported field convention '" + tag + "'");
  }
  if (h <= 0 || w <= 0) throw ParseError(path.string() + ": non-positive field size");
  auto v = torch::empty({2, h, w}, torch::kFloat64);
  auto phi = v.accessor<double, 3>();
  int64_t read = 0;
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      if (!(is >> phi[0][y][x] >> phi[1][y][x])) {
        throw ParseError(path.string() + ": size mismatch, header declares " + std::to_string(h * w) +
                         " vectors but only " + std::to_string(read) + " present");
      }
      ++read;
    }
  }
  std::string extra;
  if (is >> extra) {
    throw ParseError(path.string() + ": size mismatch, trailing data after " + std::to_string(h * w) +
                     " vectors");
  }
  try {
    return DeformationField(v);
  } catch (const InputError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace commreg

#pragma once

// Core value types shared by every commreg module: images, deformation
// fields, landmark points and the error hierarchy.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <torch/torch.h>

namespace commreg {

/// Caller passed arguments that violate an operation's preconditions.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A file on disk is missing, truncated or malformed.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value left its numeric domain (non-finite loss, score outside [0,1]).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Continuous image-plane point. `x` is the column, `y` the row.
struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

inline double distance(const Point2& a, const Point2& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

/// Single (unbatched) raster stored as a [C,H,W] float64 tensor.
///
/// Rest-state values live in [0,1]. Networks consume the [-1,1] form
/// produced by to_network().
class Image {
 public:
  Image() = default;

  explicit Image(torch::Tensor chw) : values_(chw.to(torch::kFloat64).contiguous()) {
    if (values_.dim() != 3) {
      throw InputError("Image expects a [C,H,W] tensor, got " + std::to_string(values_.dim()) +
                       " dims");
    }
    if (channels() != 1 && channels() != 3) {
      throw InputError("Image must have 1 or 3 channels, got " + std::to_string(channels()));
    }
    if (!torch::isfinite(values_).all().item<bool>()) {
      throw InputError("Image contains non-finite values");
    }
  }

  static Image zeros(int64_t channels, int64_t height, int64_t width) {
    return Image(torch::zeros({channels, height, width}, torch::kFloat64));
  }

  int64_t channels() const { return values_.size(0); }
  int64_t height() const { return values_.size(1); }
  int64_t width() const { return values_.size(2); }

  double at(int64_t c, int64_t y, int64_t x) const {
    return values_.accessor<double, 3>()[c][y][x];
  }

  const torch::Tensor& tensor() const { return values_; }

  /// [1,C,H,W] batch in [-1,1].
  torch::Tensor to_network(torch::ScalarType dtype = torch::kFloat32) const {
    return (values_ * 2.0 - 1.0).unsqueeze(0).to(dtype);
  }

  /// Inverse of to_network(); accepts [C,H,W] or [1,C,H,W] and clamps to [0,1].
  static Image from_network(const torch::Tensor& t) {
    auto chw = t.dim() == 4 ? t.squeeze(0) : t;
    return Image(((chw.detach().to(torch::kFloat64) + 1.0) * 0.5).clamp(0.0, 1.0));
  }

 private:
  torch::Tensor values_;
};

/// Dense backward-warping field: output pixel v samples the source at
/// v + (dy, dx). Stored as a [2,H,W] float64 tensor, channel 0 = dy.
class DeformationField {
 public:
  static constexpr const char* kConvention = "backward-yx-pixels";

  DeformationField() = default;

  explicit DeformationField(torch::Tensor vectors)
      : vectors_(vectors.to(torch::kFloat64).contiguous()) {
    if (vectors_.dim() != 3 || vectors_.size(0) != 2) {
      throw InputError("DeformationField expects a [2,H,W] tensor");
    }
    if (!torch::isfinite(vectors_).all().item<bool>()) {
      throw InputError("DeformationField contains non-finite vectors");
    }
  }

  static DeformationField zeros(int64_t height, int64_t width) {
    return DeformationField(torch::zeros({2, height, width}, torch::kFloat64));
  }

  static DeformationField constant(int64_t height, int64_t width, double dy, double dx) {
    auto v = torch::empty({2, height, width}, torch::kFloat64);
    v[0].fill_(dy);
    v[1].fill_(dx);
    return DeformationField(v);
  }

  int64_t height() const { return vectors_.size(1); }
  int64_t width() const { return vectors_.size(2); }

  double dy(int64_t y, int64_t x) const { return vectors_.accessor<double, 3>()[0][y][x]; }
  double dx(int64_t y, int64_t x) const { return vectors_.accessor<double, 3>()[1][y][x]; }

  double max_magnitude() const {
    return torch::sqrt(vectors_.pow(2).sum(0)).max().item<double>();
  }

  const torch::Tensor& tensor() const { return vectors_; }

 private:
  torch::Tensor vectors_;
};

namespace detail {

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InputError(message);
}

inline std::string shape_string(const torch::Tensor& t) {
  std::string s = "[";
  for (int64_t i = 0; i < t.dim(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.size(i));
  }
  return s + "]";
}

}  // namespace detail
}  // namespace commreg

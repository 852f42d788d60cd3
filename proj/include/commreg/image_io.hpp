#pragma once

#include <filesystem>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "commreg/core.hpp"

namespace commreg {

enum class PngDepth { k8, k16 };

/// Reads an 8- or 16-bit gray/RGB/RGBA PNG into [0,1]. Alpha is dropped.
inline Image read_png(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ParseError("missing image file " + path.string());
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw ParseError("cannot decode image " + path.string());
  const double scale = raw.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
  if (raw.channels() == 4) cv::cvtColor(raw, raw, cv::COLOR_BGRA2BGR);
  if (raw.channels() == 3) cv::cvtColor(raw, raw, cv::COLOR_BGR2RGB);
  cv::Mat as_double;
  raw.convertTo(as_double, CV_64F, scale);
  const int c = as_double.channels();
  auto hwc = torch::from_blob(as_double.data, {as_double.rows, as_double.cols, c}, torch::kFloat64).clone();
  return Image(hwc.permute({2, 0, 1}));
}

inline void write_png(const std::filesystem::path& path, const Image& image, PngDepth depth = PngDepth::k8) {
  const double maxval = depth == PngDepth::k16 ? 65535.0 : 255.0;
  auto hwc = (image.tensor().clamp(0.0, 1.0) * maxval).round().permute({1, 2, 0}).contiguous();
  const int c = static_cast<int>(image.channels());
  cv::Mat as_double(static_cast<int>(image.height()), static_cast<int>(image.width()), CV_64FC(c),
                    hwc.data_ptr<double>());
  cv::Mat out;
  as_double.convertTo(out, depth == PngDepth::k16 ? CV_16U : CV_8U);
  if (c == 3) cv::cvtColor(out, out, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), out)) throw std::runtime_error("cannot write image " + path.string());
}

/// Rounds values to the grid a PNG of the given depth can represent.
inline Image quantize(const Image& image, PngDepth depth) {
  const double maxval = depth == PngDepth::k16 ? 65535.0 : 255.0;
  return Image((image.tensor().clamp(0.0, 1.0) * maxval).round() / maxval);
}

}  // namespace commreg

#pragma once

// Synthetic paired-modality benchmark with exact ground-truth warps and
// landmarks, plus the on-disk dataset layout:
//
//   root/a/NNNNNN.png          modality A (RGB), warped
//   root/b/NNNNNN.png          modality B (gray), aligned reference frame
//   root/gt/NNNNNN.field       ground-truth backward field (optional at load)
//   root/landmarks/NNNNNN.csv  "x_a,y_a,x_b,y_b" rows (optional at load)
//   root/mask/NNNNNN.png       object silhouettes in the B frame (optional)
//   root/manifest.json         config echo, sample count, salient counts

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "json.hpp"

#include "commreg/core.hpp"
#include "commreg/field.hpp"
#include "commreg/image_io.hpp"

namespace commreg {

struct SyntheticSceneConfig {
  int64_t height = 64;
  int64_t width = 64;
  int64_t min_shapes = 8;
  int64_t max_shapes = 14;
  double texture_amplitude = 0.35;
  double texture_period = 9.0;
  // Width (px) of the smooth ramp at shape borders; 0 gives hard edges.
  double edge_softness = 4.0;
  // Photometric map A -> B: luminance mix, gamma, inversion, edge blend.
  std::array<double, 3> mix = {0.2, 0.5, 0.3};
  double gamma = 0.7;
  bool invert = true;
  double edge_blend = 0.25;
  // Ground-truth warp: blurred white noise rescaled to max_displacement.
  double warp_sigma = 0.0;  // 0 selects min(H,W)/8
  double max_displacement = 8.0;
  int64_t min_landmarks = 10;
  int64_t max_landmarks = 15;
  uint64_t seed = 1;

  double effective_sigma() const {
    return warp_sigma > 0.0 ? warp_sigma : static_cast<double>(std::min(height, width)) / 8.0;
  }

  void validate() const {
    detail::require(height >= 8 && width >= 8, "scene size must be at least 8x8");
    detail::require(min_shapes >= 1 && max_shapes >= min_shapes, "invalid shape count range");
    detail::require(max_displacement >= 0.0 &&
                        max_displacement < static_cast<double>(std::min(height, width)) / 4.0,
                    "max_displacement must lie in [0, min(H,W)/4)");
    detail::require(min_landmarks >= 10 && max_landmarks <= 15 && min_landmarks <= max_landmarks,
                    "landmark count range must lie within [10,15]");
    detail::require(edge_softness >= 0.0, "edge_softness must be non-negative");
    detail::require(gamma > 0.0 && edge_blend >= 0.0 && edge_blend <= 1.0, "invalid modality parameters");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticSceneConfig, height, width, min_shapes, max_shapes,
                                                texture_amplitude, texture_period, edge_softness, mix, gamma, invert,
                                                edge_blend, warp_sigma, max_displacement, min_landmarks,
                                                max_landmarks, seed)

struct LandmarkPair {
  Point2 a;  // in i_a's frame
  Point2 b;  // in i_b's frame
};

/// Matched points; the first `salient_count` sit on photometric-gradient
/// maxima, the rest are general scene points.
struct LandmarkPairSet {
  std::vector<LandmarkPair> pairs;
  std::size_t salient_count = 0;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

struct PairedSample {
  Image i_a;
  Image i_b;
  std::optional<DeformationField> gt_field;
  std::optional<LandmarkPairSet> landmarks;
  std::optional<Image> mask;
};

namespace detail {

struct Shape {
  enum class Kind { Ellipse, Rectangle } kind;
  double cy, cx, ry, rx, angle;
  std::array<double, 3> color;

  /// Approximate signed distance to the border, negative inside.
  double distance(double y, double x) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double ly = (y - cy) * c - (x - cx) * s;
    const double lx = (y - cy) * s + (x - cx) * c;
    if (kind == Kind::Ellipse) {
      return (std::sqrt((ly * ly) / (ry * ry) + (lx * lx) / (rx * rx)) - 1.0) * std::min(ry, rx);
    }
    return std::max(std::abs(ly) - ry, std::abs(lx) - rx);
  }

  bool contains(double y, double x) const { return distance(y, x) <= 0.0; }

  /// Opacity: a smoothstep ramp of width `softness` centred on the border.
  double coverage(double y, double x, double softness) const {
    const double d = distance(y, x);
    if (softness <= 0.0) return d <= 0.0 ? 1.0 : 0.0;
    const double t = std::clamp(0.5 - d / softness, 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
  }
};

/// Continuous modality-A scene: textured background plus shapes painted
/// in order.
struct Scene {
  std::vector<Shape> shapes;
  std::array<double, 3> base;
  std::array<double, 3> phase;
  double amplitude, period, softness;

  std::array<double, 3> color_at(double y, double x) const {
    std::array<double, 3> rgb{};
    for (int c = 0; c < 3; ++c) {
      rgb[c] = base[c] + amplitude * std::sin(x / period + phase[c]) * std::cos(y / (1.3 * period) + phase[c]);
    }
    for (const auto& s : shapes) {
      const double a = s.coverage(y, x, softness);
      if (a <= 0.0) continue;
      for (int c = 0; c < 3; ++c) rgb[c] = (1.0 - a) * rgb[c] + a * s.color[c];
    }
    return rgb;
  }

  bool object_at(double y, double x) const {
    return std::any_of(shapes.begin(), shapes.end(), [&](const Shape& s) { return s.contains(y, x); });
  }

  /// 2x2 supersampled color at a continuous location.
  std::array<double, 3> render(double y, double x) const {
    std::array<double, 3> acc{};
    for (double oy : {-0.25, 0.25}) {
      for (double ox : {-0.25, 0.25}) {
        const auto c = color_at(y + oy, x + ox);
        for (int k = 0; k < 3; ++k) acc[k] += 0.25 * c[k];
      }
    }
    return acc;
  }
};

inline std::mt19937_64 sample_rng(uint64_t seed, uint64_t index) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(index), static_cast<uint32_t>(index >> 32), 0x5eedu};
  return std::mt19937_64(seq);
}

// Portable uniform draw in [lo, hi): std::uniform_real_distribution is
// implementation-defined, this is not.
inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

inline int64_t uniform_int(std::mt19937_64& rng, int64_t lo, int64_t hi_inclusive) {
  const auto span = static_cast<uint64_t>(hi_inclusive - lo + 1);
  return lo + static_cast<int64_t>(rng() % span);
}

inline double normal(std::mt19937_64& rng) {
  // Box-Muller; deterministic across standard libraries.
  double u1 = uniform(rng, 0.0, 1.0);
  const double u2 = uniform(rng, 0.0, 1.0);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

inline Scene make_scene(const SyntheticSceneConfig& cfg, std::mt19937_64& rng) {
  Scene scene;
  scene.amplitude = cfg.texture_amplitude;
  scene.period = cfg.texture_period;
  scene.softness = cfg.edge_softness;
  for (int c = 0; c < 3; ++c) {
    scene.base[c] = uniform(rng, 0.35, 0.6);
    scene.phase[c] = uniform(rng, 0.0, 6.283185307179586);
  }
  const int64_t n = uniform_int(rng, cfg.min_shapes, cfg.max_shapes);
  const double h = static_cast<double>(cfg.height), w = static_cast<double>(cfg.width);
  const double lo = 0.06 * std::min(h, w), hi = 0.22 * std::min(h, w);
  for (int64_t i = 0; i < n; ++i) {
    Shape s;
    s.kind = uniform(rng, 0.0, 1.0) < 0.6 ? Shape::Kind::Ellipse : Shape::Kind::Rectangle;
    s.cy = uniform(rng, 0.12 * h, 0.88 * h);
    s.cx = uniform(rng, 0.12 * w, 0.88 * w);
    s.ry = uniform(rng, lo, hi);
    s.rx = uniform(rng, lo, hi);
    s.angle = uniform(rng, 0.0, 3.141592653589793);
    for (auto& c : s.color) c = uniform(rng, 0.0, 1.0);
    scene.shapes.push_back(s);
  }
  return scene;
}

/// Smooth random field: per-pixel Gaussian noise, blurred, scaled so the
/// largest vector has length max_displacement.
inline DeformationField make_gt_field(const SyntheticSceneConfig& cfg, std::mt19937_64& rng) {
  const int h = static_cast<int>(cfg.height), w = static_cast<int>(cfg.width);
  auto v = torch::zeros({2, h, w}, torch::kFloat64);
  if (cfg.max_displacement <= 0.0) return DeformationField(v);
  const double sigma = cfg.effective_sigma();
  for (int comp = 0; comp < 2; ++comp) {
    cv::Mat noise(h, w, CV_64F);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) noise.at<double>(y, x) = normal(rng);
    cv::Mat smooth;
    cv::GaussianBlur(noise, smooth, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT);
    auto acc = v.accessor<double, 3>();
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) acc[comp][y][x] = smooth.at<double>(y, x);
  }
  const double peak = torch::sqrt(v.pow(2).sum(0)).max().item<double>();
  if (peak > 0.0) v *= cfg.max_displacement / peak;
  return DeformationField(v);
}

/// Bilinear field lookup with edge clamping (used only for inversion).
inline std::array<double, 2> field_at(const DeformationField& f, double y, double x) {
  const auto h = f.height(), w = f.width();
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = std::min<int64_t>(static_cast<int64_t>(y), h - 2 < 0 ? 0 : h - 2);
  const auto x0 = std::min<int64_t>(static_cast<int64_t>(x), w - 2 < 0 ? 0 : w - 2);
  const double wy = y - static_cast<double>(y0), wx = x - static_cast<double>(x0);
  std::array<double, 2> out{};
  auto a = f.tensor().accessor<double, 3>();
  for (int c = 0; c < 2; ++c) {
    out[c] = (1 - wy) * (1 - wx) * a[c][y0][x0] + (1 - wy) * wx * a[c][y0][x0 + 1] +
             wy * (1 - wx) * a[c][y0 + 1][x0] + wy * wx * a[c][y0 + 1][x0 + 1];
  }
  return out;
}

/// Solves v + field(v) = target by damped fixed-point iteration.
inline std::array<double, 2> invert_point(const DeformationField& f, double ty, double tx) {
  double vy = ty, vx = tx;
  for (int it = 0; it < 60; ++it) {
    const auto d = field_at(f, vy, vx);
    vy += 0.7 * (ty - vy - d[0]);
    vx += 0.7 * (tx - vx - d[1]);
  }
  return {vy, vx};
}

/// Photometric map from modality A to modality B (single channel).
inline torch::Tensor modality_b(const SyntheticSceneConfig& cfg, const torch::Tensor& rgb) {
  auto lum = cfg.mix[0] * rgb[0] + cfg.mix[1] * rgb[1] + cfg.mix[2] * rgb[2];
  lum = lum.clamp(0.0, 1.0).pow(cfg.gamma);
  if (cfg.invert) lum = 1.0 - lum;
  const int h = static_cast<int>(lum.size(0)), w = static_cast<int>(lum.size(1));
  auto lum_c = lum.contiguous();
  cv::Mat g(h, w, CV_64F, lum_c.data_ptr<double>());
  cv::Mat gx, gy, mag;
  cv::Sobel(g, gx, CV_64F, 1, 0, 3, 1.0, 0.0, cv::BORDER_REFLECT);
  cv::Sobel(g, gy, CV_64F, 0, 1, 3, 1.0, 0.0, cv::BORDER_REFLECT);
  cv::magnitude(gx, gy, mag);
  auto edge = torch::from_blob(mag.data, {h, w}, torch::kFloat64).clone() / 4.0;
  auto out = (1.0 - cfg.edge_blend) * lum + cfg.edge_blend * edge.clamp(0.0, 1.0);
  return out.clamp(0.0, 1.0).unsqueeze(0);
}

inline std::vector<std::pair<int64_t, int64_t>> salient_candidates(const torch::Tensor& gray) {
  const int h = static_cast<int>(gray.size(1)), w = static_cast<int>(gray.size(2));
  auto g = gray[0].contiguous();
  cv::Mat m(h, w, CV_64F, g.data_ptr<double>());
  cv::Mat gx, gy, mag;
  cv::Sobel(m, gx, CV_64F, 1, 0, 3, 1.0, 0.0, cv::BORDER_REFLECT);
  cv::Sobel(m, gy, CV_64F, 0, 1, 3, 1.0, 0.0, cv::BORDER_REFLECT);
  cv::magnitude(gx, gy, mag);
  std::vector<std::tuple<double, int64_t, int64_t>> peaks;
  for (int y = 1; y + 1 < h; ++y) {
    for (int x = 1; x + 1 < w; ++x) {
      const double v = mag.at<double>(y, x);
      if (v < 0.05) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if ((dy || dx) && mag.at<double>(y + dy, x + dx) > v) {
            is_max = false;
            break;
          }
      if (is_max) peaks.emplace_back(v, y, x);
    }
  }
  std::stable_sort(peaks.begin(), peaks.end(),
                   [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
  std::vector<std::pair<int64_t, int64_t>> out;
  for (const auto& [v, y, x] : peaks) {
    const bool far = std::all_of(out.begin(), out.end(), [&](const auto& p) {
      return std::abs(p.first - y) + std::abs(p.second - x) >= 6;
    });
    if (far) out.emplace_back(y, x);
  }
  return out;
}

}  // namespace detail

/// Renders one sample. Deterministic in (cfg.seed, index).
inline PairedSample generate_sample(const SyntheticSceneConfig& cfg, uint64_t index) {
  cfg.validate();
  auto rng = detail::sample_rng(cfg.seed, index);
  const auto scene = detail::make_scene(cfg, rng);
  const auto gt = detail::make_gt_field(cfg, rng);
  const int64_t h = cfg.height, w = cfg.width;

  auto rgb_b = torch::empty({3, h, w}, torch::kFloat64);
  auto rgb_a = torch::empty({3, h, w}, torch::kFloat64);
  auto mask = torch::zeros({1, h, w}, torch::kFloat64);
  {
    auto b = rgb_b.accessor<double, 3>();
    auto a = rgb_a.accessor<double, 3>();
    auto m = mask.accessor<double, 3>();
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const auto cb = scene.render(static_cast<double>(y), static_cast<double>(x));
        // i_a(w) shows the scene point v with v + gt(v) = w.
        const auto src = detail::invert_point(gt, static_cast<double>(y), static_cast<double>(x));
        const auto ca = scene.render(src[0], src[1]);
        for (int c = 0; c < 3; ++c) {
          b[c][y][x] = cb[c];
          a[c][y][x] = ca[c];
        }
        m[0][y][x] = scene.object_at(static_cast<double>(y), static_cast<double>(x)) ? 1.0 : 0.0;
      }
    }
  }

  PairedSample sample;
  sample.i_a = quantize(Image(rgb_a.clamp(0.0, 1.0)), PngDepth::k16);
  sample.i_b = quantize(Image(detail::modality_b(cfg, rgb_b.clamp(0.0, 1.0))), PngDepth::k16);
  sample.mask = Image(mask);

  // Landmarks live on the B grid; their A positions follow from the field.
  LandmarkPairSet lm;
  const int64_t count = detail::uniform_int(rng, cfg.min_landmarks, cfg.max_landmarks);
  const int64_t want_salient = count / 2;
  auto phi = gt.tensor().accessor<double, 3>();
  const int64_t margin = 2;
  auto try_add = [&](int64_t y, int64_t x) {
    if (y < margin || x < margin || y >= h - margin || x >= w - margin) return false;
    const Point2 pb{static_cast<double>(x), static_cast<double>(y)};
    const Point2 pa{pb.x + phi[1][y][x], pb.y + phi[0][y][x]};
    if (pa.x < 0 || pa.y < 0 || pa.x > static_cast<double>(w - 1) || pa.y > static_cast<double>(h - 1)) return false;
    for (const auto& p : lm.pairs)
      if (p.b == pb) return false;
    lm.pairs.push_back({pa, pb});
    return true;
  };
  for (const auto& [y, x] : detail::salient_candidates(sample.i_b.tensor())) {
    if (static_cast<int64_t>(lm.pairs.size()) >= want_salient) break;
    try_add(y, x);
  }
  lm.salient_count = lm.pairs.size();
  for (int guard = 0; static_cast<int64_t>(lm.pairs.size()) < count && guard < 10000; ++guard) {
    try_add(detail::uniform_int(rng, 0, h - 1), detail::uniform_int(rng, 0, w - 1));
  }
  sample.landmarks = std::move(lm);
  sample.gt_field = gt;
  return sample;
}

// ---------------------------------------------------------------------------
// Dataset layout I/O.

inline std::string sample_stem(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return buf;
}

inline void write_landmarks(const std::filesystem::path& path, const LandmarkPairSet& lm) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "x_a,y_a,x_b,y_b\n";
  char buf[128];
  for (const auto& p : lm.pairs) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", p.a.x, p.a.y, p.b.x, p.b.y);
    os << buf;
  }
}

/// Parses a landmark CSV and checks every point against the image bounds.
inline LandmarkPairSet read_landmarks(const std::filesystem::path& path, int64_t height, int64_t width) {
  std::ifstream is(path);
  if (!is) throw ParseError("missing landmark file " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "x_a,y_a,x_b,y_b") {
    throw ParseError(path.string() + ": expected header 'x_a,y_a,x_b,y_b'");
  }
  LandmarkPairSet lm;
  std::size_t row = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::array<double, 4> v{};
    std::stringstream ss(line);
    std::string cell;
    std::size_t k = 0;
    for (; k < 4 && std::getline(ss, cell, ','); ++k) {
      try {
        std::size_t used = 0;
        v[k] = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw ParseError(path.string() + ": row " + std::to_string(row) + " has a malformed value '" + cell + "'");
      }
    }
    if (k != 4 || std::getline(ss, cell, ',')) {
      throw ParseError(path.string() + ": row " + std::to_string(row) + " must have exactly 4 columns");
    }
    const auto in_bounds = [&](double x, double y) {
      return std::isfinite(x) && std::isfinite(y) && x >= 0 && y >= 0 && x <= static_cast<double>(width - 1) &&
             y <= static_cast<double>(height - 1);
    };
    if (!in_bounds(v[0], v[1]) || !in_bounds(v[2], v[3])) {
      throw ParseError(path.string() + ": row " + std::to_string(row) + " has a point outside the " +
                       std::to_string(height) + "x" + std::to_string(width) + " image");
    }
    lm.pairs.push_back({{v[0], v[1]}, {v[2], v[3]}});
    ++row;
  }
  return lm;
}

struct DatasetManifest {
  std::size_t count = 0;
  std::vector<std::size_t> salient_counts;
  std::optional<SyntheticSceneConfig> config;
};

inline DatasetManifest read_dataset_manifest(const std::filesystem::path& root) {
  DatasetManifest m;
  const auto path = root / "manifest.json";
  if (std::filesystem::exists(path)) {
    std::ifstream is(path);
    nlohmann::json j;
    try {
      is >> j;
    } catch (const std::exception& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
    m.count = j.value("count", std::size_t{0});
    if (j.contains("samples")) {
      for (const auto& s : j["samples"]) m.salient_counts.push_back(s.value("salient", std::size_t{0}));
    }
    if (j.contains("config")) m.config = j["config"].get<SyntheticSceneConfig>();
    return m;
  }
  // Layout without a manifest: count the A images.
  const auto dir = root / "a";
  if (!std::filesystem::is_directory(dir)) throw ParseError("dataset " + root.string() + " has no a/ directory");
  while (std::filesystem::exists(dir / (sample_stem(m.count) + ".png"))) ++m.count;
  return m;
}

/// Loads sample `index` and validates every invariant of the stored files.
inline PairedSample load_pair(const std::filesystem::path& root, std::size_t index) {
  const auto stem = sample_stem(index);
  PairedSample s;
  s.i_a = read_png(root / "a" / (stem + ".png"));
  s.i_b = read_png(root / "b" / (stem + ".png"));
  if (s.i_a.height() != s.i_b.height() || s.i_a.width() != s.i_b.width()) {
    throw ParseError("sample " + stem + ": a/ and b/ images differ in size");
  }
  const auto gt_path = root / "gt" / (stem + ".field");
  if (std::filesystem::exists(gt_path)) {
    auto f = read_field(gt_path);
    if (f.height() != s.i_a.height() || f.width() != s.i_a.width()) {
      throw ParseError(gt_path.string() + ": size mismatch, field is " + std::to_string(f.height()) + "x" +
                       std::to_string(f.width()) + " but images are " + std::to_string(s.i_a.height()) + "x" +
                       std::to_string(s.i_a.width()));
    }
    s.gt_field = std::move(f);
  }
  const auto lm_path = root / "landmarks" / (stem + ".csv");
  if (std::filesystem::exists(lm_path)) {
    s.landmarks = read_landmarks(lm_path, s.i_a.height(), s.i_a.width());
    const auto manifest_path = root / "manifest.json";
    if (std::filesystem::exists(manifest_path)) {
      const auto m = read_dataset_manifest(root);
      if (index < m.salient_counts.size()) {
        s.landmarks->salient_count = std::min(m.salient_counts[index], s.landmarks->size());
      }
    }
  }
  const auto mask_path = root / "mask" / (stem + ".png");
  if (std::filesystem::exists(mask_path)) s.mask = read_png(mask_path);
  return s;
}

/// Writes `n` samples under `root` in the dataset layout. Sample i is
/// generated from index `first_index + i`, so disjoint splits can share a
/// scene seed.
inline void generate_dataset(const SyntheticSceneConfig& cfg, std::size_t n, const std::filesystem::path& root,
                             std::size_t first_index = 0) {
  cfg.validate();
  namespace fs = std::filesystem;
  for (const char* sub : {"a", "b", "gt", "landmarks", "mask"}) {
    std::error_code ec;
    fs::create_directories(root / sub, ec);
    if (ec) throw std::runtime_error("cannot create " + (root / sub).string() + ": " + ec.message());
  }
  nlohmann::json samples = nlohmann::json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = generate_sample(cfg, first_index + i);
    const auto stem = sample_stem(i);
    write_png(root / "a" / (stem + ".png"), s.i_a, PngDepth::k16);
    write_png(root / "b" / (stem + ".png"), s.i_b, PngDepth::k16);
    write_png(root / "mask" / (stem + ".png"), *s.mask, PngDepth::k8);
    write_field(root / "gt" / (stem + ".field"), *s.gt_field);
    write_landmarks(root / "landmarks" / (stem + ".csv"), *s.landmarks);
    samples.push_back({{"id", stem}, {"salient", s.landmarks->salient_count}});
  }
  nlohmann::json manifest = {{"format", "commreg-dataset-v1"},
                             {"count", n},
                             {"first_index", first_index},
                             {"config", cfg},
                             {"samples", samples}};
  std::ofstream os(root / "manifest.json", std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + (root / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

/// Whole dataset held in memory.
struct Dataset {
  std::filesystem::path root;
  std::vector<PairedSample> samples;

  static Dataset load(const std::filesystem::path& root) {
    const auto m = read_dataset_manifest(root);
    Dataset d{root, {}};
    d.samples.reserve(m.count);
    for (std::size_t i = 0; i < m.count; ++i) d.samples.push_back(load_pair(root, i));
    if (d.samples.empty()) throw InputError("dataset " + root.string() + " is empty");
    return d;
  }

  std::size_t size() const { return samples.size(); }
};

}  // namespace commreg

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "wps/common.hpp"
#include "wps/image_ops.hpp"
#include "wps/rng.hpp"
#include "wps/tensor.hpp"

namespace wps {

enum class WeatherKind : uint32_t { Rain = 0, Fog = 1, Snow = 2 };

inline const char* weather_name(WeatherKind k) {
  switch (k) {
    case WeatherKind::Rain: return "rain";
    case WeatherKind::Fog: return "fog";
    case WeatherKind::Snow: return "snow";
  }
  return "?";
}

// One paired sample: a clear image, its semantic labels, and the same scene
// under a rendered weather degradation. clean and degraded always share the
// label grid.
struct Scene {
  Tensor<float> clean;     // 3 x H x W in [0,1]
  LabelMask label;         // H x W, class ids in {0..C-1}
  Tensor<float> degraded;  // 3 x H x W in [0,1]
  WeatherKind weather = WeatherKind::Fog;
  float severity = 0.0f;
  uint64_t seed = 0;
  uint32_t num_classes = 0;
};

namespace detail {

inline std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1)      { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else             { r = c; b = x; }
  const double m = v - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

// Golden-angle hue stepping keeps up to 32 class colors well separated.
// The palette is a pure function of the class id so color -> class is a
// stable mapping across all scenes.
inline std::array<float, 3> class_color(int cls) {
  const double hue = std::fmod(0.13 + cls * 0.61803398874989485, 1.0);
  const double val = (cls % 2 == 0) ? 0.82 : 0.60;
  return hsv_to_rgb(hue, 0.68, val);
}

// Single-octave value noise on an 8 px lattice, bilinearly interpolated.
inline std::vector<float> value_noise(int h, int w, Rng& rng) {
  const int cell = 8;
  const int gh = h / cell + 2, gw = w / cell + 2;
  std::vector<float> lattice(static_cast<size_t>(gh) * gw);
  for (auto& v : lattice) v = static_cast<float>(rng.uniform());
  std::vector<float> field(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    const double fy = static_cast<double>(y) / cell;
    const int y0 = static_cast<int>(fy);
    const double wy = fy - y0;
    for (int x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x) / cell;
      const int x0 = static_cast<int>(fx);
      const double wx = fx - x0;
      const double a = lattice[static_cast<size_t>(y0) * gw + x0];
      const double b = lattice[static_cast<size_t>(y0) * gw + x0 + 1];
      const double c = lattice[static_cast<size_t>(y0 + 1) * gw + x0];
      const double d = lattice[static_cast<size_t>(y0 + 1) * gw + x0 + 1];
      field[static_cast<size_t>(y) * w + x] =
          static_cast<float>((1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d));
    }
  }
  return field;
}

inline void paint_pixel(Tensor<float>& img, LabelMask& label, int y, int x, int cls,
                        float noise) {
  const auto base = class_color(cls);
  const float offset = 0.10f * (noise - 0.5f);
  for (int k = 0; k < 3; ++k)
    img.at(k, y, x) = std::clamp(base[static_cast<size_t>(k)] + offset, 0.0f, 1.0f);
  label.at(y, x) = static_cast<uint8_t>(cls);
}

struct Polygon {
  std::vector<double> xs, ys;

  bool contains(double px, double py) const {
    bool inside = false;
    const size_t n = xs.size();
    for (size_t i = 0, j = n - 1; i < n; j = i++) {
      if ((ys[i] > py) != (ys[j] > py) &&
          px < (xs[j] - xs[i]) * (py - ys[i]) / (ys[j] - ys[i]) + xs[i])
        inside = !inside;
    }
    return inside;
  }
};

}  // namespace detail

// Additive anti-aliased streak field: N parallel bright streaks at a fixed
// 80-degree slope, each row crossing depositing `intensity` split between
// the two nearest columns.
inline void overlay_rain(Tensor<float>& img, int count, Rng& rng) {
  const int h = img.dim(1), w = img.dim(2);
  const double angle = 80.0 * M_PI / 180.0;
  const double dx_per_y = std::cos(angle) / std::sin(angle);
  const float intensity = 0.25f;
  for (int s = 0; s < count; ++s) {
    const double x0 = rng.uniform() * w;
    const double y0 = rng.uniform() * h;
    const double len = rng.uniform_in(5.0, 12.0);
    const int rows = static_cast<int>(std::ceil(len * std::sin(angle)));
    for (int r = 0; r < rows; ++r) {
      const int y = static_cast<int>(y0) + r;
      if (y < 0 || y >= h) continue;
      const double x = x0 + r * dx_per_y;
      const int xi = static_cast<int>(std::floor(x));
      const float fx = static_cast<float>(x - xi);
      if (xi >= 0 && xi < w)
        for (int k = 0; k < 3; ++k) img.at(k, y, xi) += intensity * (1.0f - fx);
      if (xi + 1 >= 0 && xi + 1 < w)
        for (int k = 0; k < 3; ++k) img.at(k, y, xi + 1) += intensity * fx;
    }
  }
}

inline void overlay_snow(Tensor<float>& img, int count, Rng& rng) {
  const int h = img.dim(1), w = img.dim(2);
  for (int s = 0; s < count; ++s) {
    const int x = static_cast<int>(rng.range(static_cast<uint32_t>(w)));
    const int y = static_cast<int>(rng.range(static_cast<uint32_t>(h)));
    const float bright = static_cast<float>(rng.uniform_in(0.4, 0.8));
    const bool two_px = rng.bernoulli(0.5);
    for (int k = 0; k < 3; ++k) img.at(k, y, x) += bright;
    if (two_px) {
      static constexpr int dy[4] = {0, 0, 1, -1};
      static constexpr int dx[4] = {1, -1, 0, 0};
      const int d = static_cast<int>(rng.range(4));
      const int ny = y + dy[d], nx = x + dx[d];
      if (ny >= 0 && ny < h && nx >= 0 && nx < w)
        for (int k = 0; k < 3; ++k) img.at(k, ny, nx) += bright;
    }
  }
}

// Renders a weather degradation onto a clean image. Analytic and seeded:
// the label grid is untouched by construction.
inline Tensor<float> degrade(const Tensor<float>& clean, WeatherKind kind, double severity,
                             uint64_t seed) {
  check(severity >= 0.0 && severity <= 1.0,
        "degrade: severity must be in [0,1], got " + std::to_string(severity));
  Tensor<float> out = clean;
  Rng rng(seed);
  const float gray = 0.7f;
  switch (kind) {
    case WeatherKind::Fog: {
      const float a = static_cast<float>(0.8 * severity);
      float* p = out.data();
      for (int64_t i = 0; i < out.size(); ++i) p[i] = (1.0f - a) * p[i] + a * gray;
      break;
    }
    case WeatherKind::Rain: {
      overlay_rain(out, static_cast<int>(std::lround(200.0 * severity)), rng);
      clamp01(out);
      break;
    }
    case WeatherKind::Snow: {
      const float a = static_cast<float>(0.3 * severity);
      float* p = out.data();
      for (int64_t i = 0; i < out.size(); ++i) p[i] = (1.0f - a) * p[i] + a * gray;
      overlay_snow(out, static_cast<int>(std::lround(300.0 * severity)), rng);
      clamp01(out);
      break;
    }
  }
  return out;
}

// Procedural paired scene: sky band, ground band, and 1..4 convex objects,
// each region filled with its class color plus low-amplitude value noise.
// Pure function of the arguments, bit-exactly reproducible.
inline Scene generate_scene(uint64_t seed, int height, int width, int num_classes) {
  check(height >= 16 && width >= 16,
        "generate_scene: height and width must be >= 16");
  check(num_classes >= 2 && num_classes <= 32,
        "generate_scene: num_classes must be in [2,32], got " + std::to_string(num_classes));

  Scene scene;
  scene.seed = seed;
  scene.num_classes = static_cast<uint32_t>(num_classes);
  scene.clean = Tensor<float>(3, height, width);
  scene.label = LabelMask(height, width);

  Rng layout(derive_seed(seed, {kStreamLayout}));
  Rng noise_rng(derive_seed(seed, {kStreamNoise}));
  const std::vector<float> noise = detail::value_noise(height, width, noise_rng);
  auto noise_at = [&](int y, int x) { return noise[static_cast<size_t>(y) * width + x]; };

  const int sky_cls = static_cast<int>(layout.range(static_cast<uint32_t>(num_classes)));
  const int ground_cls =
      (sky_cls + 1 + static_cast<int>(layout.range(static_cast<uint32_t>(num_classes - 1)))) %
      num_classes;
  const int horizon = static_cast<int>(std::lround(height * layout.uniform_in(0.35, 0.65)));

  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      detail::paint_pixel(scene.clean, scene.label, y, x, y < horizon ? sky_cls : ground_cls,
                          noise_at(y, x));

  const int object_count = 1 + static_cast<int>(layout.range(4));
  const double base_radius = 0.01 * std::min(height, width);
  for (int obj = 0; obj < object_count; ++obj) {
    const int cls = static_cast<int>(layout.range(static_cast<uint32_t>(num_classes)));
    const double cx = layout.uniform_in(0.15, 0.85) * width;
    const double cy = layout.uniform_in(0.15, 0.85) * height;
    const int kind = static_cast<int>(layout.range(3));
    if (kind == 0) {
      // axis-aligned ellipse
      const double rx = layout.uniform_in(10.0, 28.0) * base_radius;
      const double ry = layout.uniform_in(10.0, 28.0) * base_radius;
      const int y_lo = std::max(0, static_cast<int>(cy - ry) - 1);
      const int y_hi = std::min(height - 1, static_cast<int>(cy + ry) + 1);
      const int x_lo = std::max(0, static_cast<int>(cx - rx) - 1);
      const int x_hi = std::min(width - 1, static_cast<int>(cx + rx) + 1);
      for (int y = y_lo; y <= y_hi; ++y)
        for (int x = x_lo; x <= x_hi; ++x) {
          const double u = (x + 0.5 - cx) / rx, v = (y + 0.5 - cy) / ry;
          if (u * u + v * v <= 1.0)
            detail::paint_pixel(scene.clean, scene.label, y, x, cls, noise_at(y, x));
        }
    } else {
      // convex polygon: 3 or 4 vertices at sorted angles around the center
      const int verts = kind == 1 ? 3 : 4;
      detail::Polygon poly;
      const double phase = layout.uniform_in(0.0, 2.0 * M_PI);
      for (int vtx = 0; vtx < verts; ++vtx) {
        const double ang = phase + 2.0 * M_PI * vtx / verts + layout.uniform_in(-0.3, 0.3);
        const double rad = layout.uniform_in(10.0, 28.0) * base_radius;
        poly.xs.push_back(cx + rad * std::cos(ang));
        poly.ys.push_back(cy + rad * std::sin(ang));
      }
      const double x_min = *std::min_element(poly.xs.begin(), poly.xs.end());
      const double x_max = *std::max_element(poly.xs.begin(), poly.xs.end());
      const double y_min = *std::min_element(poly.ys.begin(), poly.ys.end());
      const double y_max = *std::max_element(poly.ys.begin(), poly.ys.end());
      const int y_lo = std::max(0, static_cast<int>(y_min) - 1);
      const int y_hi = std::min(height - 1, static_cast<int>(y_max) + 1);
      const int x_lo = std::max(0, static_cast<int>(x_min) - 1);
      const int x_hi = std::min(width - 1, static_cast<int>(x_max) + 1);
      for (int y = y_lo; y <= y_hi; ++y)
        for (int x = x_lo; x <= x_hi; ++x)
          if (poly.contains(x + 0.5, y + 0.5))
            detail::paint_pixel(scene.clean, scene.label, y, x, cls, noise_at(y, x));
    }
  }

  Rng weather_rng(derive_seed(seed, {kStreamWeather}));
  scene.weather = static_cast<WeatherKind>(weather_rng.range(3));
  scene.severity = static_cast<float>(weather_rng.uniform_in(0.7, 1.0));
  scene.degraded =
      degrade(scene.clean, scene.weather, scene.severity, derive_seed(seed, {kStreamDegrade}));
  return scene;
}

}  // namespace wps

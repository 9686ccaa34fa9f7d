#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "wps/tensor.hpp"

namespace wps {

// Pixel-center sampling: dst pixel oy maps to (oy + 0.5) * sh / oh - 0.5.
// A same-size resize is an exact copy.
template <typename S>
Tensor<S> resize_bilinear(const Tensor<S>& src, int oh, int ow) {
  const int c = src.dim(0), sh = src.dim(1), sw = src.dim(2);
  if (oh == sh && ow == sw) return src;
  Tensor<S> out(c, oh, ow);
  const double ry = static_cast<double>(sh) / oh;
  const double rx = static_cast<double>(sw) / ow;
  for (int oy = 0; oy < oh; ++oy) {
    double fy = (oy + 0.5) * ry - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(sh - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - y0;
    for (int ox = 0; ox < ow; ++ox) {
      double fx = (ox + 0.5) * rx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(sw - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - x0;
      for (int k = 0; k < c; ++k) {
        const double top = (1.0 - wx) * src.at(k, y0, x0) + wx * src.at(k, y0, x1);
        const double bot = (1.0 - wx) * src.at(k, y1, x0) + wx * src.at(k, y1, x1);
        out.at(k, oy, ox) = static_cast<S>((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

// Nearest-neighbor resampling for label/confidence grids: the value set
// never grows.
inline ByteGrid resize_nearest(const ByteGrid& src, int oh, int ow) {
  if (oh == src.h && ow == src.w) return src;
  ByteGrid out(oh, ow);
  const double ry = static_cast<double>(src.h) / oh;
  const double rx = static_cast<double>(src.w) / ow;
  for (int oy = 0; oy < oh; ++oy) {
    int sy = static_cast<int>(std::floor((oy + 0.5) * ry));
    sy = std::clamp(sy, 0, src.h - 1);
    for (int ox = 0; ox < ow; ++ox) {
      int sx = static_cast<int>(std::floor((ox + 0.5) * rx));
      sx = std::clamp(sx, 0, src.w - 1);
      out.at(oy, ox) = src.at(sy, sx);
    }
  }
  return out;
}

template <typename S>
Tensor<S> hflip(const Tensor<S>& src) {
  const int c = src.dim(0), h = src.dim(1), w = src.dim(2);
  Tensor<S> out(c, h, w);
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < h; ++y) {
      const S* in_row = src.row(k, y);
      S* out_row = out.row(k, y);
      for (int x = 0; x < w; ++x) out_row[x] = in_row[w - 1 - x];
    }
  return out;
}

inline ByteGrid hflip(const ByteGrid& src) {
  ByteGrid out(src.h, src.w);
  for (int y = 0; y < src.h; ++y)
    for (int x = 0; x < src.w; ++x) out.at(y, x) = src.at(y, src.w - 1 - x);
  return out;
}

// Rec.601 luma, written so r == g == b reproduces the input bit-exactly.
template <typename S>
Tensor<S> to_grayscale(const Tensor<S>& src) {
  const int h = src.dim(1), w = src.dim(2);
  Tensor<S> out(3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double r = src.at(0, y, x), g = src.at(1, y, x), b = src.at(2, y, x);
      const S luma = static_cast<S>(b + 0.299 * (r - b) + 0.587 * (g - b));
      out.at(0, y, x) = luma;
      out.at(1, y, x) = luma;
      out.at(2, y, x) = luma;
    }
  return out;
}

// Separable Gaussian, clamp-to-edge boundary. sigma <= 0 is the identity.
template <typename S>
Tensor<S> gaussian_blur(const Tensor<S>& src, double sigma) {
  if (sigma <= 0.0) return src;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += kernel[static_cast<size_t>(i + radius)];
  }
  for (double& k : kernel) k /= sum;

  const int c = src.dim(0), h = src.dim(1), w = src.dim(2);
  Tensor<S> tmp(c, h, w), out(c, h, w);
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int xi = std::clamp(x + i, 0, w - 1);
          acc += kernel[static_cast<size_t>(i + radius)] * src.at(k, y, xi);
        }
        tmp.at(k, y, x) = static_cast<S>(acc);
      }
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int yi = std::clamp(y + i, 0, h - 1);
          acc += kernel[static_cast<size_t>(i + radius)] * tmp.at(k, yi, x);
        }
        out.at(k, y, x) = static_cast<S>(acc);
      }
  return out;
}

template <typename S>
void clamp01(Tensor<S>& img) {
  S* p = img.data();
  for (int64_t i = 0; i < img.size(); ++i) p[i] = std::clamp(p[i], S(0), S(1));
}

template <typename S>
double image_mean(const Tensor<S>& img) {
  double acc = 0.0;
  const S* p = img.data();
  for (int64_t i = 0; i < img.size(); ++i) acc += p[i];
  return img.size() > 0 ? acc / static_cast<double>(img.size()) : 0.0;
}

}  // namespace wps

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "wps/common.hpp"

namespace wps {

// Dense row-major tensor of rank 1..4. Rank 3 carries activations
// (channels x height x width), rank 4 carries conv kernels
// (out_ch x in_ch x kh x kw).
template <typename S>
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(int n) : rank_(1), dims_{n, 1, 1, 1}, v_(static_cast<size_t>(n), S(0)) {}

  Tensor(int c, int h, int w)
      : rank_(3), dims_{c, h, w, 1}, v_(static_cast<size_t>(c) * h * w, S(0)) {}

  Tensor(int oc, int ic, int kh, int kw)
      : rank_(4),
        dims_{oc, ic, kh, kw},
        v_(static_cast<size_t>(oc) * ic * kh * kw, S(0)) {}

  int rank() const { return rank_; }
  int dim(int i) const { return dims_[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(v_.size()); }
  bool empty() const { return v_.empty(); }

  S* data() { return v_.data(); }
  const S* data() const { return v_.data(); }

  S& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
  const S& operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

  S& at(int c, int y, int x) {
    return v_[(static_cast<size_t>(c) * dims_[1] + y) * dims_[2] + x];
  }
  const S& at(int c, int y, int x) const {
    return v_[(static_cast<size_t>(c) * dims_[1] + y) * dims_[2] + x];
  }

  S& at(int o, int i, int y, int x) {
    return v_[((static_cast<size_t>(o) * dims_[1] + i) * dims_[2] + y) * dims_[3] + x];
  }
  const S& at(int o, int i, int y, int x) const {
    return v_[((static_cast<size_t>(o) * dims_[1] + i) * dims_[2] + y) * dims_[3] + x];
  }

  S* row(int c, int y) { return v_.data() + (static_cast<size_t>(c) * dims_[1] + y) * dims_[2]; }
  const S* row(int c, int y) const {
    return v_.data() + (static_cast<size_t>(c) * dims_[1] + y) * dims_[2];
  }

  void fill(S value) { std::fill(v_.begin(), v_.end(), value); }

  bool same_shape(const Tensor& o) const { return rank_ == o.rank_ && dims_ == o.dims_; }

  bool all_finite() const {
    for (S x : v_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.rank_ = rank_;
    out.dims_ = dims_;
    out.v_.resize(v_.size());
    for (size_t i = 0; i < v_.size(); ++i) out.v_[i] = static_cast<T>(v_[i]);
    return out;
  }

  std::string shape_str() const {
    std::string s = "(";
    for (int i = 0; i < rank_; ++i) {
      if (i) s += "x";
      s += std::to_string(dims_[static_cast<size_t>(i)]);
    }
    return s + ")";
  }

  bool operator==(const Tensor& o) const {
    return rank_ == o.rank_ && dims_ == o.dims_ && v_ == o.v_;
  }

private:
  template <typename T>
  friend class Tensor;

  int rank_ = 0;
  std::array<int, 4> dims_{0, 0, 0, 0};
  std::vector<S> v_;
};

// H x W byte grid. LabelMask holds class ids (255 = ignore), BinaryMask
// holds 0/1 confidence bits.
struct ByteGrid {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> v;

  ByteGrid() = default;
  ByteGrid(int h_, int w_, uint8_t value = 0)
      : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, value) {}

  uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
  uint8_t* row(int y) { return v.data() + static_cast<size_t>(y) * w; }
  const uint8_t* row(int y) const { return v.data() + static_cast<size_t>(y) * w; }
  int64_t size() const { return static_cast<int64_t>(v.size()); }

  bool operator==(const ByteGrid& o) const { return h == o.h && w == o.w && v == o.v; }
};

using LabelMask = ByteGrid;
using BinaryMask = ByteGrid;

constexpr uint8_t kIgnoreLabel = 255;

// Shape-preserving (re)allocation: keeps the existing storage when the
// shape already matches, so hot paths can reuse scratch tensors.
template <typename S>
void ensure_shape(Tensor<S>& t, int c, int h, int w) {
  if (t.rank() != 3 || t.dim(0) != c || t.dim(1) != h || t.dim(2) != w) t = Tensor<S>(c, h, w);
}

template <typename S>
void ensure_shape(Tensor<S>& t, int oc, int ic, int kh, int kw) {
  if (t.rank() != 4 || t.dim(0) != oc || t.dim(1) != ic || t.dim(2) != kh || t.dim(3) != kw)
    t = Tensor<S>(oc, ic, kh, kw);
}

}  // namespace wps

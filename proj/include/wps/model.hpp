#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "wps/common.hpp"
#include "wps/losses.hpp"
#include "wps/rng.hpp"
#include "wps/tensor.hpp"

namespace wps {

constexpr int kFeatureChannels = 32;  // encoder output channels

// Binary channel selector for complementary feature dropout.
struct ChannelMask {
  std::vector<uint8_t> bits;

  bool empty() const { return bits.empty(); }
  size_t size() const { return bits.size(); }
};

// Named parameter tensors for the encoder/decoder pair. Iteration order is
// frozen: EMA, SGD, checkpoints and finite-difference sweeps all walk the
// same sequence.
template <typename S>
struct ParamSet {
  int num_classes = 0;
  Tensor<S> enc_conv1_w, enc_conv1_b;  // 16x3x3x3, 16
  Tensor<S> enc_conv2_w, enc_conv2_b;  // 32x16x3x3, 32 (stride 2)
  Tensor<S> enc_conv3_w, enc_conv3_b;  // 32x32x3x3, 32
  Tensor<S> dec_conv1_w, dec_conv1_b;  // 16x32x3x3, 16
  Tensor<S> dec_conv2_w, dec_conv2_b;  // Cx16x1x1, C

  static ParamSet zeros(int num_classes) {
    check(num_classes >= 2, "ParamSet: need at least 2 classes");
    ParamSet p;
    p.num_classes = num_classes;
    p.enc_conv1_w = Tensor<S>(16, 3, 3, 3);
    p.enc_conv1_b = Tensor<S>(16);
    p.enc_conv2_w = Tensor<S>(32, 16, 3, 3);
    p.enc_conv2_b = Tensor<S>(32);
    p.enc_conv3_w = Tensor<S>(kFeatureChannels, 32, 3, 3);
    p.enc_conv3_b = Tensor<S>(kFeatureChannels);
    p.dec_conv1_w = Tensor<S>(16, kFeatureChannels, 3, 3);
    p.dec_conv1_b = Tensor<S>(16);
    p.dec_conv2_w = Tensor<S>(num_classes, 16, 1, 1);
    p.dec_conv2_b = Tensor<S>(num_classes);
    return p;
  }

  // He-normal weights, zero biases.
  static ParamSet init(int num_classes, uint64_t seed) {
    ParamSet p = zeros(num_classes);
    uint64_t idx = 0;
    p.for_each([&](std::string_view name, Tensor<S>& t) {
      Rng rng(derive_seed(seed, {kStreamInit, idx++}));
      if (t.rank() != 4) return;  // biases stay zero
      const double fan_in = static_cast<double>(t.dim(1)) * t.dim(2) * t.dim(3);
      const double std_dev = std::sqrt(2.0 / fan_in);
      for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(std_dev * rng.normal());
      (void)name;
    });
    return p;
  }

  template <typename F>
  void for_each(F&& f) {
    f(std::string_view("enc.conv1.w"), enc_conv1_w);
    f(std::string_view("enc.conv1.b"), enc_conv1_b);
    f(std::string_view("enc.conv2.w"), enc_conv2_w);
    f(std::string_view("enc.conv2.b"), enc_conv2_b);
    f(std::string_view("enc.conv3.w"), enc_conv3_w);
    f(std::string_view("enc.conv3.b"), enc_conv3_b);
    f(std::string_view("dec.conv1.w"), dec_conv1_w);
    f(std::string_view("dec.conv1.b"), dec_conv1_b);
    f(std::string_view("dec.conv2.w"), dec_conv2_w);
    f(std::string_view("dec.conv2.b"), dec_conv2_b);
  }

  template <typename F>
  void for_each(F&& f) const {
    const_cast<ParamSet*>(this)->for_each(
        [&](std::string_view n, Tensor<S>& t) { f(n, static_cast<const Tensor<S>&>(t)); });
  }

  bool same_shape(const ParamSet& o) const {
    bool ok = num_classes == o.num_classes;
    for_each([&](std::string_view name, const Tensor<S>& t) {
      const Tensor<S>* other = nullptr;
      o.for_each([&](std::string_view n2, const Tensor<S>& t2) {
        if (n2 == name) other = &t2;
      });
      ok = ok && other && t.same_shape(*other);
    });
    return ok;
  }

  void fill(S value) {
    for_each([&](std::string_view, Tensor<S>& t) { t.fill(value); });
  }

  template <typename T>
  ParamSet<T> cast() const {
    ParamSet<T> out = ParamSet<T>::zeros(num_classes);
    const Tensor<S>* src[10];
    int i = 0;
    for_each([&](std::string_view, const Tensor<S>& t) { src[i++] = &t; });
    i = 0;
    out.for_each([&](std::string_view, Tensor<T>& t) { t = src[i++]->template cast<T>(); });
    return out;
  }

  bool all_finite(std::string* first_bad = nullptr) const {
    bool ok = true;
    for_each([&](std::string_view name, const Tensor<S>& t) {
      if (ok && !t.all_finite()) {
        ok = false;
        if (first_bad) *first_bad = std::string(name);
      }
    });
    return ok;
  }
};

inline bool is_encoder_param(std::string_view name) { return name.starts_with("enc."); }

// --- primitive kernels -----------------------------------------------------
//
// All three conv kernels run on a zero-padded copy of their input, which
// removes every boundary branch from the hot loops. The forward pass blocks
// two output channels by two output rows so the inner loop carries four
// independent FMA chains; the weight-gradient pass accumulates each kernel
// tap elementwise into a row buffer and reduces once at the end (a direct
// dot product would be an FP reduction the compiler cannot vectorize).

namespace detail {

// Writes in into the interior of buf (borders stay zero: fresh allocations
// are zeroed and nothing ever writes nonzero into the margin).
template <typename S>
void zero_padded_into(const Tensor<S>& in, int pad, Tensor<S>& buf) {
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  ensure_shape(buf, c, h + 2 * pad, w + 2 * pad);
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < h; ++y) {
      const S* src = in.row(k, y);
      S* dst = buf.row(k, y + pad) + pad;
      for (int x = 0; x < w; ++x) dst[x] = src[x];
    }
}

// One (2 out-channels x 2 out-rows x T out-columns) stride-1 tile. The T
// accumulator arrays are fixed-size locals, so they live in vector
// registers across the whole ic*kh*kw reduction.
template <typename S, int T>
void conv_s1_tile(const Tensor<S>& padded, const Tensor<S>& w, const S* bias, int oc0, int oc1,
                  int oy0, int oy1, int ox0, Tensor<S>& out, bool two_oc, bool two_oy) {
  const int ic_n = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  S a00[T] = {}, a01[T] = {}, a10[T] = {}, a11[T] = {};
  for (int ic = 0; ic < ic_n; ++ic) {
    const S* wrow0 = &w.at(oc0, ic, 0, 0);
    const S* wrow1 = &w.at(oc1, ic, 0, 0);
    for (int ky = 0; ky < kh; ++ky) {
      const S* __restrict p0 = padded.row(ic, oy0 + ky) + ox0;
      const S* __restrict p1 = padded.row(ic, oy1 + ky) + ox0;
      for (int kx = 0; kx < kw; ++kx) {
        const S w0 = wrow0[ky * kw + kx];
        const S w1 = wrow1[ky * kw + kx];
        for (int t = 0; t < T; ++t) {
          const S v0 = p0[kx + t];
          const S v1 = p1[kx + t];
          a00[t] += w0 * v0;
          a01[t] += w0 * v1;
          a10[t] += w1 * v0;
          a11[t] += w1 * v1;
        }
      }
    }
  }
  S* o = out.row(oc0, oy0) + ox0;
  for (int t = 0; t < T; ++t) o[t] = a00[t] + bias[oc0];
  if (two_oy) {
    o = out.row(oc0, oy1) + ox0;
    for (int t = 0; t < T; ++t) o[t] = a01[t] + bias[oc0];
  }
  if (two_oc) {
    o = out.row(oc1, oy0) + ox0;
    for (int t = 0; t < T; ++t) o[t] = a10[t] + bias[oc1];
    if (two_oy) {
      o = out.row(oc1, oy1) + ox0;
      for (int t = 0; t < T; ++t) o[t] = a11[t] + bias[oc1];
    }
  }
}

// Splits a padded plane stack into even/odd column planes. A stride-2 tap
// (ky, kx) then reads plane kx&1 at column ox + kx/2, which is contiguous
// in ox, so the stride-2 kernels vectorize exactly like stride-1.
template <typename S>
void split_columns_into(const Tensor<S>& p, Tensor<S>& even, Tensor<S>& odd) {
  const int c = p.dim(0), h = p.dim(1), w = p.dim(2);
  ensure_shape(even, c, h, (w + 1) / 2);
  ensure_shape(odd, c, h, std::max(1, w / 2));
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < h; ++y) {
      const S* src = p.row(k, y);
      S* e = even.row(k, y);
      S* o = odd.row(k, y);
      for (int x = 0; x < w / 2; ++x) {
        e[x] = src[2 * x];
        o[x] = src[2 * x + 1];
      }
      if (w % 2) e[w / 2] = src[w - 1];
    }
}

template <typename S, int T>
void conv_s2_tile(const Tensor<S>& even, const Tensor<S>& odd, const Tensor<S>& w,
                  const S* bias, int oc0, int oc1, int oy0, int oy1, int ox0, Tensor<S>& out,
                  bool two_oc, bool two_oy) {
  const int ic_n = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  S a00[T] = {}, a01[T] = {}, a10[T] = {}, a11[T] = {};
  for (int ic = 0; ic < ic_n; ++ic) {
    const S* wrow0 = &w.at(oc0, ic, 0, 0);
    const S* wrow1 = &w.at(oc1, ic, 0, 0);
    for (int ky = 0; ky < kh; ++ky) {
      const int py0 = oy0 * 2 + ky, py1 = oy1 * 2 + ky;
      // even taps then odd taps, each sub-loop on one uniform plane pointer
      for (int half = 0; half < 2; ++half) {
        const Tensor<S>& src = half ? odd : even;
        const S* __restrict s0 = src.row(ic, py0) + ox0;
        const S* __restrict s1 = src.row(ic, py1) + ox0;
        for (int kx = half; kx < kw; kx += 2) {
          const S* p0 = s0 + kx / 2;
          const S* p1 = s1 + kx / 2;
          const S w0 = wrow0[ky * kw + kx];
          const S w1 = wrow1[ky * kw + kx];
          for (int t = 0; t < T; ++t) {
            const S v0 = p0[t];
            const S v1 = p1[t];
            a00[t] += w0 * v0;
            a01[t] += w0 * v1;
            a10[t] += w1 * v0;
            a11[t] += w1 * v1;
          }
        }
      }
    }
  }
  S* o = out.row(oc0, oy0) + ox0;
  for (int t = 0; t < T; ++t) o[t] = a00[t] + bias[oc0];
  if (two_oy) {
    o = out.row(oc0, oy1) + ox0;
    for (int t = 0; t < T; ++t) o[t] = a01[t] + bias[oc0];
  }
  if (two_oc) {
    o = out.row(oc1, oy0) + ox0;
    for (int t = 0; t < T; ++t) o[t] = a10[t] + bias[oc1];
    if (two_oy) {
      o = out.row(oc1, oy1) + ox0;
      for (int t = 0; t < T; ++t) o[t] = a11[t] + bias[oc1];
    }
  }
}

template <typename S>
void conv_s2(const Tensor<S>& padded, const Tensor<S>& w, const Tensor<S>& b, Tensor<S>& out) {
  const int oc_n = w.dim(0), ic_n = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int oh = out.dim(1), ow = out.dim(2);
  static thread_local Tensor<S> even, odd;
  split_columns_into(padded, even, odd);
  for (int oc0 = 0; oc0 < oc_n; oc0 += 2) {
    const bool two_oc = oc0 + 1 < oc_n;
    const int oc1 = two_oc ? oc0 + 1 : oc0;
    for (int oy0 = 0; oy0 < oh; oy0 += 2) {
      const bool two_oy = oy0 + 1 < oh;
      const int oy1 = two_oy ? oy0 + 1 : oy0;
      int ox0 = 0;
      for (; ox0 + 16 <= ow; ox0 += 16)
        conv_s2_tile<S, 16>(even, odd, w, b.data(), oc0, oc1, oy0, oy1, ox0, out, two_oc, two_oy);
      for (; ox0 + 8 <= ow; ox0 += 8)
        conv_s2_tile<S, 8>(even, odd, w, b.data(), oc0, oc1, oy0, oy1, ox0, out, two_oc, two_oy);
      for (; ox0 + 4 <= ow; ox0 += 4)
        conv_s2_tile<S, 4>(even, odd, w, b.data(), oc0, oc1, oy0, oy1, ox0, out, two_oc, two_oy);
      for (; ox0 < ow; ++ox0) {
        for (int pass = 0; pass < (two_oc ? 2 : 1); ++pass) {
          const int oc = pass == 0 ? oc0 : oc1;
          for (int r = 0; r < (two_oy ? 2 : 1); ++r) {
            const int oy = r == 0 ? oy0 : oy1;
            S acc = b[oc];
            for (int ic = 0; ic < ic_n; ++ic)
              for (int ky = 0; ky < kh; ++ky) {
                const S* prow = padded.row(ic, oy * 2 + ky) + ox0 * 2;
                const S* wrow = &w.at(oc, ic, ky, 0);
                for (int kx = 0; kx < kw; ++kx) acc += wrow[kx] * prow[kx];
              }
            out.at(oc, oy, ox0) = acc;
          }
        }
      }
    }
  }
}

template <typename S>
void conv_s1(const Tensor<S>& padded, const Tensor<S>& w, const Tensor<S>& b, Tensor<S>& out) {
  const int oc_n = w.dim(0), ic_n = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int oh = out.dim(1), ow = out.dim(2);
  for (int oc0 = 0; oc0 < oc_n; oc0 += 2) {
    const bool two_oc = oc0 + 1 < oc_n;
    const int oc1 = two_oc ? oc0 + 1 : oc0;
    for (int oy0 = 0; oy0 < oh; oy0 += 2) {
      const bool two_oy = oy0 + 1 < oh;
      const int oy1 = two_oy ? oy0 + 1 : oy0;
      int ox0 = 0;
      for (; ox0 + 16 <= ow; ox0 += 16)
        conv_s1_tile<S, 16>(padded, w, b.data(), oc0, oc1, oy0, oy1, ox0, out, two_oc, two_oy);
      for (; ox0 + 8 <= ow; ox0 += 8)
        conv_s1_tile<S, 8>(padded, w, b.data(), oc0, oc1, oy0, oy1, ox0, out, two_oc, two_oy);
      for (; ox0 + 4 <= ow; ox0 += 4)
        conv_s1_tile<S, 4>(padded, w, b.data(), oc0, oc1, oy0, oy1, ox0, out, two_oc, two_oy);
      // scalar tail
      for (; ox0 < ow; ++ox0) {
        for (int pass = 0; pass < (two_oc ? 2 : 1); ++pass) {
          const int oc = pass == 0 ? oc0 : oc1;
          for (int r = 0; r < (two_oy ? 2 : 1); ++r) {
            const int oy = r == 0 ? oy0 : oy1;
            S acc = b[oc];
            for (int ic = 0; ic < ic_n; ++ic)
              for (int ky = 0; ky < kh; ++ky) {
                const S* prow = padded.row(ic, oy + ky) + ox0;
                const S* wrow = &w.at(oc, ic, ky, 0);
                for (int kx = 0; kx < kw; ++kx) acc += wrow[kx] * prow[kx];
              }
            out.at(oc, oy, ox0) = acc;
          }
        }
      }
    }
  }
}

}  // namespace detail

// out[oc] = b[oc] + sum_ic conv(in[ic], w[oc][ic]); out must be presized to
// (OC x OH x OW).
template <typename S>
void conv2d_forward(const Tensor<S>& in, const Tensor<S>& w, const Tensor<S>& b, int stride,
                    int pad, Tensor<S>& out) {
  static thread_local Tensor<S> padded_storage;
  const Tensor<S>* padded = &in;
  if (pad > 0) {
    detail::zero_padded_into(in, pad, padded_storage);
    padded = &padded_storage;
  }
  if (stride == 1) {
    detail::conv_s1(*padded, w, b, out);
  } else {
    check(stride == 2, "conv2d_forward: only strides 1 and 2 are supported");
    detail::conv_s2(*padded, w, b, out);
  }
}

// Routes gout back through the conv (exact transpose of the forward
// gather), overwriting gin. Stride 1 runs as a forward conv of the padded
// gout against flipped transposed weights; stride 2 scatters.
template <typename S>
void conv2d_backward_input(const Tensor<S>& gout, const Tensor<S>& w, int stride, int pad,
                           Tensor<S>& gin) {
  const int oc_n = w.dim(0), ic_n = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int oh = gout.dim(1), ow = gout.dim(2);
  const int ih = gin.dim(1), iw = gin.dim(2);

  if (stride == 1) {
    static thread_local Tensor<S> flipped;
    ensure_shape(flipped, ic_n, oc_n, kh, kw);
    for (int oc = 0; oc < oc_n; ++oc)
      for (int ic = 0; ic < ic_n; ++ic)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx)
            flipped.at(ic, oc, ky, kx) = w.at(oc, ic, kh - 1 - ky, kw - 1 - kx);
    const Tensor<S> zero_bias(ic_n);
    conv2d_forward(gout, flipped, zero_bias, 1, kh - 1 - pad, gin);
    return;
  }

  // strided path: scatter into deinterleaved padded planes (contiguous in
  // ox), interleave and crop back
  check(stride == 2, "conv2d_backward_input: only strides 1 and 2 are supported");
  const int ph = ih + 2 * pad, pw = iw + 2 * pad;
  Tensor<S> even(ic_n, ph, (pw + 1) / 2), odd(ic_n, ph, std::max(1, pw / 2));
  for (int oc = 0; oc < oc_n; ++oc) {
    for (int ic = 0; ic < ic_n; ++ic) {
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const S wv = w.at(oc, ic, ky, kx);
          Tensor<S>& plane = (kx & 1) ? odd : even;
          for (int oy = 0; oy < oh; ++oy) {
            const S* __restrict grow = gout.row(oc, oy);
            S* __restrict prow = plane.row(ic, oy * 2 + ky) + kx / 2;
            for (int ox = 0; ox < ow; ++ox) prow[ox] += wv * grow[ox];
          }
        }
      }
    }
  }
  for (int ic = 0; ic < ic_n; ++ic)
    for (int iy = 0; iy < ih; ++iy) {
      const S* e = even.row(ic, iy + pad);
      const S* o = odd.row(ic, iy + pad);
      S* dst = gin.row(ic, iy);
      for (int ix = 0; ix < iw; ++ix) {
        const int px = ix + pad;
        dst[ix] = (px & 1) ? o[px / 2] : e[px / 2];
      }
    }
}

// Accumulates weight and bias gradients into gw/gb.
template <typename S>
void conv2d_backward_params(const Tensor<S>& gout, const Tensor<S>& in, int stride, int pad,
                            Tensor<S>& gw, Tensor<S>& gb) {
  const int oc_n = gw.dim(0), ic_n = gw.dim(1), kh = gw.dim(2), kw = gw.dim(3);
  const int oh = gout.dim(1), ow = gout.dim(2);

  static thread_local Tensor<S> padded_storage;
  const Tensor<S>* padded = &in;
  if (pad > 0) {
    detail::zero_padded_into(in, pad, padded_storage);
    padded = &padded_storage;
  }

  static thread_local Tensor<S> even, odd;
  if (stride != 1) {
    check(stride == 2, "conv2d_backward_params: only strides 1 and 2 are supported");
    detail::split_columns_into(*padded, even, odd);
  }

  const int taps = kh * kw;
  std::vector<S> tap_buf(static_cast<size_t>(taps) * ow);
  std::vector<S> bias_buf(static_cast<size_t>(ow));

  for (int oc = 0; oc < oc_n; ++oc) {
    std::fill(bias_buf.begin(), bias_buf.end(), S(0));
    for (int oy = 0; oy < oh; ++oy) {
      const S* __restrict grow = gout.row(oc, oy);
      S* __restrict bacc = bias_buf.data();
      for (int ox = 0; ox < ow; ++ox) bacc[ox] += grow[ox];
    }
    S bias_sum = S(0);
    for (int ox = 0; ox < ow; ++ox) bias_sum += bias_buf[static_cast<size_t>(ox)];
    gb[oc] += bias_sum;

    for (int ic = 0; ic < ic_n; ++ic) {
      std::fill(tap_buf.begin(), tap_buf.end(), S(0));
      for (int oy = 0; oy < oh; ++oy) {
        const S* __restrict grow = gout.row(oc, oy);
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            S* __restrict tacc = tap_buf.data() + static_cast<size_t>(ky * kw + kx) * ow;
            const S* __restrict p =
                stride == 1 ? padded->row(ic, oy + ky) + kx
                            : ((kx & 1) ? odd : even).row(ic, oy * 2 + ky) + kx / 2;
            for (int ox = 0; ox < ow; ++ox) tacc[ox] += grow[ox] * p[ox];
          }
        }
      }
      for (int t = 0; t < taps; ++t) {
        S acc = S(0);
        const S* tacc = tap_buf.data() + static_cast<size_t>(t) * ow;
        for (int ox = 0; ox < ow; ++ox) acc += tacc[ox];
        gw.at(oc, ic, t / kw, t % kw) += acc;
      }
    }
  }
}

template <typename S>
void relu_forward(const Tensor<S>& pre, Tensor<S>& act) {
  const S* p = pre.data();
  S* a = act.data();
  for (int64_t i = 0; i < pre.size(); ++i) a[i] = p[i] > S(0) ? p[i] : S(0);
}

template <typename S>
void relu_backward(const Tensor<S>& pre, Tensor<S>& grad) {
  const S* p = pre.data();
  S* g = grad.data();
  for (int64_t i = 0; i < pre.size(); ++i)
    if (p[i] <= S(0)) g[i] = S(0);
}

template <typename S>
void upsample2x_forward(const Tensor<S>& in, Tensor<S>& out) {
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < h; ++y) {
      const S* irow = in.row(k, y);
      S* orow0 = out.row(k, 2 * y);
      S* orow1 = out.row(k, 2 * y + 1);
      for (int x = 0; x < w; ++x) {
        orow0[2 * x] = irow[x];
        orow0[2 * x + 1] = irow[x];
        orow1[2 * x] = irow[x];
        orow1[2 * x + 1] = irow[x];
      }
    }
}

// Gradient of nearest-neighbor x2: each source cell collects its 2x2 block.
template <typename S>
void upsample2x_backward(const Tensor<S>& gout, Tensor<S>& gin) {
  const int c = gin.dim(0), h = gin.dim(1), w = gin.dim(2);
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < h; ++y) {
      const S* grow0 = gout.row(k, 2 * y);
      const S* grow1 = gout.row(k, 2 * y + 1);
      S* girow = gin.row(k, y);
      for (int x = 0; x < w; ++x)
        girow[x] = grow0[2 * x] + grow0[2 * x + 1] + grow1[2 * x] + grow1[2 * x + 1];
    }
}

// --- channel dropout ---------------------------------------------------------

// First mask draws each bit Bernoulli(keep_prob); the second is its exact
// bitwise complement.
inline std::pair<ChannelMask, ChannelMask> sample_complementary_masks(Rng& rng,
                                                                      double keep_prob = 0.5) {
  check(keep_prob > 0.0 && keep_prob < 1.0, "sample_complementary_masks: keep_prob in (0,1)");
  ChannelMask a, b;
  a.bits.resize(kFeatureChannels);
  b.bits.resize(kFeatureChannels);
  for (int k = 0; k < kFeatureChannels; ++k) {
    a.bits[static_cast<size_t>(k)] = rng.bernoulli(keep_prob) ? 1 : 0;
    b.bits[static_cast<size_t>(k)] = a.bits[static_cast<size_t>(k)] ^ 1;
  }
  return {a, b};
}

// Channel k of the output is 2 * mask[k] * input; the x2 keeps the expected
// feature magnitude at keep_prob 0.5.
template <typename S>
Tensor<S> apply_channel_dropout(const Tensor<S>& feat, const ChannelMask& mask) {
  check(static_cast<int>(mask.size()) == feat.dim(0),
        "apply_channel_dropout: mask length != channel count");
  Tensor<S> out(feat.dim(0), feat.dim(1), feat.dim(2));
  const int64_t plane = static_cast<int64_t>(feat.dim(1)) * feat.dim(2);
  for (int k = 0; k < feat.dim(0); ++k) {
    const S scale = mask.bits[static_cast<size_t>(k)] ? S(2) : S(0);
    const S* src = feat.data() + k * plane;
    S* dst = out.data() + k * plane;
    for (int64_t i = 0; i < plane; ++i) dst[i] = scale * src[i];
  }
  return out;
}

// --- EMA ---------------------------------------------------------------------

// theta_t <- decay * theta_t + (1 - decay) * theta_s. Never touches the
// student; teacher parameters change nowhere else in the library.
template <typename S>
void ema_update(ParamSet<S>& teacher, const ParamSet<S>& student, double decay) {
  check(decay >= 0.0 && decay < 1.0, "ema_update: decay must be in [0,1)");
  check(teacher.same_shape(student), "ema_update: parameter shape mismatch");
  const S g = static_cast<S>(decay);
  const S one_minus = static_cast<S>(1.0 - decay);
  const Tensor<S>* src[10];
  int i = 0;
  student.for_each([&](std::string_view, const Tensor<S>& t) { src[i++] = &t; });
  i = 0;
  teacher.for_each([&](std::string_view, Tensor<S>& t) {
    const Tensor<S>& s = *src[i++];
    S* tp = t.data();
    const S* sp = s.data();
    for (int64_t j = 0; j < t.size(); ++j) tp[j] = g * tp[j] + one_minus * sp[j];
  });
}

// --- forward / backward ------------------------------------------------------

template <typename S>
struct ForwardCache {
  Tensor<S> input;        // 3 x H x W
  Tensor<S> pre1, act1;   // 16 x H x W
  Tensor<S> pre2, act2;   // 32 x H/2 x W/2
  Tensor<S> feat;         // C_e x H/2 x W/2
  ChannelMask drop_mask;  // empty => no dropout
  Tensor<S> dec_in;       // dropped (or plain) features
  Tensor<S> dpre1, dact1; // 16 x H/2 x W/2
  Tensor<S> logits;       // C x H x W
};

template <typename S>
void check_image_shape(const Tensor<S>& img) {
  check(img.rank() == 3 && img.dim(0) == 3, "model: image must be 3xHxW, got " + img.shape_str());
  check(img.dim(1) % 2 == 0 && img.dim(2) % 2 == 0,
        "model: image height/width must be even, got " + img.shape_str());
  check(img.dim(1) >= 2 && img.dim(2) >= 2, "model: image too small " + img.shape_str());
}

// conv3x3(3->16) ReLU, conv3x3 stride2 (16->32) ReLU, conv3x3(32->C_e).
template <typename S>
void encode_cached(const ParamSet<S>& params, const Tensor<S>& img, ForwardCache<S>& cache) {
  check_image_shape(img);
  const int h = img.dim(1), w = img.dim(2);
  const int h2 = h / 2, w2 = w / 2;
  cache.input = img;
  ensure_shape(cache.pre1, 16, h, w);
  conv2d_forward(img, params.enc_conv1_w, params.enc_conv1_b, 1, 1, cache.pre1);
  ensure_shape(cache.act1, 16, h, w);
  relu_forward(cache.pre1, cache.act1);
  ensure_shape(cache.pre2, 32, h2, w2);
  conv2d_forward(cache.act1, params.enc_conv2_w, params.enc_conv2_b, 2, 1, cache.pre2);
  ensure_shape(cache.act2, 32, h2, w2);
  relu_forward(cache.pre2, cache.act2);
  ensure_shape(cache.feat, kFeatureChannels, h2, w2);
  conv2d_forward(cache.act2, params.enc_conv3_w, params.enc_conv3_b, 1, 1, cache.feat);
}

template <typename S>
Tensor<S> encode(const ParamSet<S>& params, const Tensor<S>& img) {
  ForwardCache<S> cache;
  encode_cached(params, img, cache);
  return std::move(cache.feat);
}

// conv3x3(C_e->16) ReLU, nearest-neighbor x2, conv1x1(16->C). Returns logits.
template <typename S>
void decode_cached(const ParamSet<S>& params, const Tensor<S>& feat, ForwardCache<S>& cache) {
  check(feat.rank() == 3 && feat.dim(0) == kFeatureChannels,
        "decode: feature map must be " + std::to_string(kFeatureChannels) + "xH'xW', got " +
            feat.shape_str());
  const int h2 = feat.dim(1), w2 = feat.dim(2);
  cache.dec_in = feat;
  cache.dpre1 = Tensor<S>(16, h2, w2);
  conv2d_forward(feat, params.dec_conv1_w, params.dec_conv1_b, 1, 1, cache.dpre1);
  cache.dact1 = Tensor<S>(16, h2, w2);
  relu_forward(cache.dpre1, cache.dact1);
  Tensor<S> up(16, 2 * h2, 2 * w2);
  upsample2x_forward(cache.dact1, up);
  cache.logits = Tensor<S>(params.num_classes, 2 * h2, 2 * w2);
  conv2d_forward(up, params.dec_conv2_w, params.dec_conv2_b, 1, 0, cache.logits);
}

template <typename S>
Tensor<S> decode(const ParamSet<S>& params, const Tensor<S>& feat) {
  ForwardCache<S> cache;
  decode_cached(params, feat, cache);
  return std::move(cache.logits);
}

// Full student pass with optional complementary dropout between encoder and
// decoder. The cache keeps every pre-activation the backward pass needs.
template <typename S>
void forward_student(const ParamSet<S>& params, const Tensor<S>& img, const ChannelMask* mask,
                     ForwardCache<S>& cache) {
  encode_cached(params, img, cache);
  if (mask) {
    cache.drop_mask = *mask;
    decode_cached(params, apply_channel_dropout(cache.feat, *mask), cache);
  } else {
    cache.drop_mask = ChannelMask{};
    decode_cached(params, cache.feat, cache);
  }
}

// Exact reverse of forward_student; accumulates into grads. With
// freeze_encoder the enc.* gradients are left untouched (zero for a fresh
// accumulator) and the encoder sweep is skipped entirely.
template <typename S>
void backward_student(const ParamSet<S>& params, const ForwardCache<S>& cache,
                      const Tensor<S>& glogits, ParamSet<S>& grads, bool freeze_encoder) {
  const int h2 = cache.dec_in.dim(1), w2 = cache.dec_in.dim(2);

  // dec.conv2 (1x1 on the upsampled grid)
  Tensor<S> up(16, 2 * h2, 2 * w2);
  upsample2x_forward(cache.dact1, up);
  conv2d_backward_params(glogits, up, 1, 0, grads.dec_conv2_w, grads.dec_conv2_b);
  Tensor<S> g_up(16, 2 * h2, 2 * w2);
  conv2d_backward_input(glogits, params.dec_conv2_w, 1, 0, g_up);

  Tensor<S> g_dact1(16, h2, w2);
  upsample2x_backward(g_up, g_dact1);
  relu_backward(cache.dpre1, g_dact1);

  conv2d_backward_params(g_dact1, cache.dec_in, 1, 1, grads.dec_conv1_w, grads.dec_conv1_b);
  if (freeze_encoder) return;

  Tensor<S> g_dec_in(kFeatureChannels, h2, w2);
  conv2d_backward_input(g_dact1, params.dec_conv1_w, 1, 1, g_dec_in);

  // channel dropout gradient: 2 * mask[k] per channel
  Tensor<S>& g_feat = g_dec_in;
  if (!cache.drop_mask.empty()) {
    const int64_t plane = static_cast<int64_t>(h2) * w2;
    for (int k = 0; k < kFeatureChannels; ++k) {
      const S scale = cache.drop_mask.bits[static_cast<size_t>(k)] ? S(2) : S(0);
      S* p = g_feat.data() + k * plane;
      for (int64_t i = 0; i < plane; ++i) p[i] *= scale;
    }
  }

  conv2d_backward_params(g_feat, cache.act2, 1, 1, grads.enc_conv3_w, grads.enc_conv3_b);
  Tensor<S> g_act2(32, h2, w2);
  conv2d_backward_input(g_feat, params.enc_conv3_w, 1, 1, g_act2);
  relu_backward(cache.pre2, g_act2);

  conv2d_backward_params(g_act2, cache.act1, 2, 1, grads.enc_conv2_w, grads.enc_conv2_b);
  Tensor<S> g_act1(16, cache.input.dim(1), cache.input.dim(2));
  conv2d_backward_input(g_act2, params.enc_conv2_w, 2, 1, g_act1);
  relu_backward(cache.pre1, g_act1);

  conv2d_backward_params(g_act1, cache.input, 1, 1, grads.enc_conv1_w, grads.enc_conv1_b);
  // gradient w.r.t. the input image is never needed
}

// Per-pixel softmax of logits, normalized to 1 within float rounding.
template <typename S>
Tensor<S> softmax(const Tensor<S>& logits) {
  const int c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  Tensor<S> probs(c, h, w);
  const int64_t plane = static_cast<int64_t>(h) * w;
  const S* z = logits.data();
  S* p = probs.data();
  for (int64_t u = 0; u < plane; ++u) {
    S m = z[u];
    for (int k = 1; k < c; ++k) m = std::max(m, z[u + k * plane]);
    S sum = S(0);
    for (int k = 0; k < c; ++k) {
      const S e = std::exp(z[u + k * plane] - m);
      p[u + k * plane] = e;
      sum += e;
    }
    for (int k = 0; k < c; ++k) p[u + k * plane] /= sum;
  }
  return probs;
}

// --- training step core --------------------------------------------------------

// One optimizer step's worth of student inputs. Clean items feed the
// supervised loss; the two strong views (with aligned pseudo packs and a
// complementary mask pair per item) feed the unsupervised loss.
template <typename S>
struct TrainBatch {
  std::vector<Tensor<S>> clean_images;
  std::vector<LabelMask> clean_labels;
  std::vector<Tensor<S>> strong1, strong2;
  std::vector<PseudoPack> packs1, packs2;
  std::vector<ChannelMask> drop1, drop2;

  bool has_unsupervised() const { return !strong1.empty(); }
};

struct LossSpec {
  double unsup_weight = 1.0;
  LdNormalize norm = LdNormalize::AllPixels;
  bool freeze_encoder = false;
};

// Total loss and exact analytic gradients for every non-frozen parameter.
// Per-sample passes may run in parallel; losses and gradients reduce in
// fixed sample order, so the result is bit-identical for any worker count.
template <typename S>
LossReport forward_backward(const ParamSet<S>& params, const TrainBatch<S>& batch,
                            const LossSpec& spec, ParamSet<S>& grads, int threads = 1) {
  check(batch.clean_images.size() == batch.clean_labels.size(),
        "forward_backward: clean batch size mismatch");
  check(batch.strong1.size() == batch.strong2.size() &&
            batch.strong1.size() == batch.packs1.size() &&
            batch.strong1.size() == batch.packs2.size() &&
            batch.strong1.size() == batch.drop1.size() &&
            batch.strong1.size() == batch.drop2.size(),
        "forward_backward: strong batch size mismatch");
  check(!batch.clean_images.empty() || !batch.strong1.empty(),
        "forward_backward: empty batch");

  // Denominators are fixed before any forward pass so per-sample gradient
  // scales are known upfront.
  int64_t sup_valid = 0;
  for (const LabelMask& l : batch.clean_labels)
    for (uint8_t v : l.v)
      if (v != kIgnoreLabel) ++sup_valid;

  const size_t n_clean = batch.clean_images.size();
  const size_t n_strong = batch.strong1.size();
  double unsup_denom = 0.0;
  int64_t conf_total = 0;
  int64_t strong_pixels = 0;
  if (n_strong > 0) {
    const int64_t plane =
        static_cast<int64_t>(batch.strong1[0].dim(1)) * batch.strong1[0].dim(2);
    strong_pixels = 2 * static_cast<int64_t>(n_strong) * plane;
    conf_total = confident_count(std::span<const PseudoPack>(batch.packs1)) +
                 confident_count(std::span<const PseudoPack>(batch.packs2));
    unsup_denom = spec.norm == LdNormalize::AllPixels ? static_cast<double>(strong_pixels)
                                                      : static_cast<double>(conf_total);
  }

  const double sup_scale = sup_valid > 0 ? 1.0 / static_cast<double>(sup_valid) : 0.0;
  const double unsup_scale =
      unsup_denom > 0.0 ? spec.unsup_weight / unsup_denom : 0.0;

  struct Job {
    const Tensor<S>* image;
    const LabelMask* label;
    const BinaryMask* conf;
    const ChannelMask* mask;
    double grad_scale;
    bool supervised;
  };
  std::vector<Job> jobs;
  jobs.reserve(n_clean + 2 * n_strong);
  for (size_t i = 0; i < n_clean; ++i)
    jobs.push_back({&batch.clean_images[i], &batch.clean_labels[i], nullptr, nullptr, sup_scale,
                    true});
  for (size_t i = 0; i < n_strong; ++i) {
    jobs.push_back({&batch.strong1[i], &batch.packs1[i].label, &batch.packs1[i].conf,
                    &batch.drop1[i], unsup_scale, false});
    jobs.push_back({&batch.strong2[i], &batch.packs2[i].label, &batch.packs2[i].conf,
                    &batch.drop2[i], unsup_scale, false});
  }

  std::vector<double> job_sums(jobs.size(), 0.0);
  std::vector<ParamSet<S>> job_grads(jobs.size());
  parallel_for(static_cast<int64_t>(jobs.size()), threads, [&](int64_t j) {
    const Job& job = jobs[static_cast<size_t>(j)];
    ForwardCache<S> cache;
    forward_student(params, *job.image, job.mask, cache);
    job_grads[static_cast<size_t>(j)] = ParamSet<S>::zeros(params.num_classes);
    Tensor<S> glogits(params.num_classes, cache.logits.dim(1), cache.logits.dim(2));
    job_sums[static_cast<size_t>(j)] = masked_ce_sum<S>(
        cache.logits, *job.label, job.conf, job.grad_scale != 0.0 ? &glogits : nullptr,
        job.grad_scale, nullptr);
    if (job.grad_scale != 0.0)
      backward_student(params, cache, glogits, job_grads[static_cast<size_t>(j)],
                       spec.freeze_encoder);
  });

  grads = ParamSet<S>::zeros(params.num_classes);
  double sup_sum = 0.0, unsup_sum = 0.0;
  for (size_t j = 0; j < jobs.size(); ++j) {
    (jobs[j].supervised ? sup_sum : unsup_sum) += job_sums[j];
    Tensor<S>* dst[10];
    int i = 0;
    grads.for_each([&](std::string_view, Tensor<S>& t) { dst[i++] = &t; });
    i = 0;
    job_grads[j].for_each([&](std::string_view, const Tensor<S>& t) {
      Tensor<S>& d = *dst[i++];
      const S* src = t.data();
      S* out = d.data();
      for (int64_t k = 0; k < t.size(); ++k) out[k] += src[k];
    });
  }

  const double l_c = sup_valid > 0 ? sup_sum / static_cast<double>(sup_valid) : 0.0;
  const double l_d = unsup_denom > 0.0 ? unsup_sum / unsup_denom : 0.0;
  LossReport report = total_loss(l_c, l_d, spec.unsup_weight);
  report.confident_fraction =
      strong_pixels > 0 ? static_cast<double>(conf_total) / static_cast<double>(strong_pixels)
                        : 0.0;

  if (!std::isfinite(report.total))
    throw NumericError("forward_backward: non-finite loss (l_c=" + std::to_string(l_c) +
                       ", l_d=" + std::to_string(l_d) + ")");
  std::string bad;
  if (!grads.all_finite(&bad))
    throw NumericError("forward_backward: non-finite gradient in tensor " + bad);
  return report;
}

}  // namespace wps

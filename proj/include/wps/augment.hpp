#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "wps/common.hpp"
#include "wps/image_ops.hpp"
#include "wps/losses.hpp"
#include "wps/rng.hpp"
#include "wps/tensor.hpp"

namespace wps {

// Every spatial choice of the weak augmentation. top/left are in
// post-resize coordinates and may be negative when the resized image is
// smaller than the crop window (the uncovered pixels are padding:
// 0 for images, 255 for labels).
struct WeakRecord {
  double scale = 1.0;
  int top = 0;
  int left = 0;
  int crop_h = 0;
  int crop_w = 0;
  bool flip = false;
};

struct CutMixRecord {
  int partner_index = -1;
  int top = 0, left = 0, h = 0, w = 0;
};

struct StrongRecord {
  double brightness_scale = 1.0;
  double contrast_scale = 1.0;
  bool to_gray = false;
  double blur_sigma = 0.0;
  std::optional<CutMixRecord> cutmix;
};

struct StrongPolicy {
  double p_jitter = 0.8;
  double brightness_lo = 0.5, brightness_hi = 1.5;
  double contrast_lo = 0.5, contrast_hi = 1.5;
  double p_gray = 0.2;
  double p_blur = 0.5;
  double blur_sigma_lo = 0.1, blur_sigma_hi = 1.0;
  bool cutmix = false;  // appearance-only by default
  double p_cutmix = 0.5;
};

namespace detail {

// Copies the crop window out of the resized plane, padding where the
// window leaves the source.
template <typename T, typename Dst, typename At>
void crop_pad(Dst&& out, int crop_h, int crop_w, int top, int left, int src_h, int src_w,
              T pad_value, At&& src_at) {
  for (int y = 0; y < crop_h; ++y) {
    const int sy = y + top;
    for (int x = 0; x < crop_w; ++x) {
      const int sx = x + left;
      out(y, x) = (sy >= 0 && sy < src_h && sx >= 0 && sx < src_w) ? src_at(sy, sx) : pad_value;
    }
  }
}

}  // namespace detail

// Replays a weak record bit-exactly.
template <typename S>
Tensor<S> apply_weak_record_image(const Tensor<S>& img, const WeakRecord& rec) {
  const int rh = std::max(1, static_cast<int>(std::lround(img.dim(1) * rec.scale)));
  const int rw = std::max(1, static_cast<int>(std::lround(img.dim(2) * rec.scale)));
  const Tensor<S> resized = resize_bilinear(img, rh, rw);
  Tensor<S> out(3, rec.crop_h, rec.crop_w);
  for (int c = 0; c < 3; ++c)
    detail::crop_pad<S>([&](int y, int x) -> S& { return out.at(c, y, x); }, rec.crop_h,
                        rec.crop_w, rec.top, rec.left, rh, rw, S(0),
                        [&](int y, int x) { return resized.at(c, y, x); });
  return rec.flip ? hflip(out) : out;
}

inline LabelMask apply_weak_record_label(const LabelMask& label, const WeakRecord& rec) {
  const int rh = std::max(1, static_cast<int>(std::lround(label.h * rec.scale)));
  const int rw = std::max(1, static_cast<int>(std::lround(label.w * rec.scale)));
  const LabelMask resized = resize_nearest(label, rh, rw);
  LabelMask out(rec.crop_h, rec.crop_w);
  detail::crop_pad<uint8_t>([&](int y, int x) -> uint8_t& { return out.at(y, x); }, rec.crop_h,
                            rec.crop_w, rec.top, rec.left, rh, rw, kIgnoreLabel,
                            [&](int y, int x) { return resized.at(y, x); });
  return rec.flip ? hflip(out) : out;
}

template <typename S>
struct WeakView {
  Tensor<S> image;
  std::optional<LabelMask> label;
  WeakRecord record;
};

// Random resize in [0.75, 1.25], random crop to crop_size (padded when
// short), horizontal flip with p = 0.5. The label, when given, undergoes
// the identical spatial transform with nearest-neighbor semantics.
template <typename S>
WeakView<S> weak_augment(const Tensor<S>& img, const LabelMask* label, Rng& rng, int crop_size) {
  check(crop_size >= 2 && crop_size % 2 == 0, "weak_augment: crop size must be even and >= 2");
  WeakRecord rec;
  rec.scale = rng.uniform_in(0.75, 1.25);
  rec.crop_h = crop_size;
  rec.crop_w = crop_size;
  const int rh = std::max(1, static_cast<int>(std::lround(img.dim(1) * rec.scale)));
  const int rw = std::max(1, static_cast<int>(std::lround(img.dim(2) * rec.scale)));
  rec.top = rh >= crop_size ? static_cast<int>(rng.range(static_cast<uint32_t>(rh - crop_size + 1)))
                            : -static_cast<int>(rng.range(static_cast<uint32_t>(crop_size - rh + 1)));
  rec.left = rw >= crop_size
                 ? static_cast<int>(rng.range(static_cast<uint32_t>(rw - crop_size + 1)))
                 : -static_cast<int>(rng.range(static_cast<uint32_t>(crop_size - rw + 1)));
  rec.flip = rng.bernoulli(0.5);

  WeakView<S> view;
  view.record = rec;
  view.image = apply_weak_record_image(img, rec);
  if (label) view.label = apply_weak_record_label(*label, rec);
  return view;
}

// Appearance part of a strong record: jitter -> grayscale -> blur.
// CutMix is pasted at batch level by apply_cutmix_images.
template <typename S>
Tensor<S> apply_strong_appearance(const Tensor<S>& img, const StrongRecord& rec) {
  Tensor<S> out = img;
  if (rec.brightness_scale != 1.0 || rec.contrast_scale != 1.0) {
    S* p = out.data();
    const S b = static_cast<S>(rec.brightness_scale);
    for (int64_t i = 0; i < out.size(); ++i) p[i] *= b;
    if (rec.contrast_scale != 1.0) {
      const S mean = static_cast<S>(image_mean(out));
      const S c = static_cast<S>(rec.contrast_scale);
      for (int64_t i = 0; i < out.size(); ++i) p[i] = (p[i] - mean) * c + mean;
    }
    clamp01(out);
  }
  if (rec.to_gray) out = to_grayscale(out);
  if (rec.blur_sigma > 0.0) out = gaussian_blur(out, rec.blur_sigma);
  return out;
}

// Samples one strong view. batch_size >= 2 enables CutMix participation
// when the policy allows it; the partner is any other index in the batch.
template <typename S>
std::pair<Tensor<S>, StrongRecord> strong_augment(const Tensor<S>& view, Rng& rng,
                                                  const StrongPolicy& policy,
                                                  int batch_size = 0, int self_index = 0) {
  StrongRecord rec;
  if (rng.bernoulli(policy.p_jitter)) {
    rec.brightness_scale = rng.uniform_in(policy.brightness_lo, policy.brightness_hi);
    rec.contrast_scale = rng.uniform_in(policy.contrast_lo, policy.contrast_hi);
  }
  rec.to_gray = rng.bernoulli(policy.p_gray);
  if (rng.bernoulli(policy.p_blur))
    rec.blur_sigma = rng.uniform_in(policy.blur_sigma_lo, policy.blur_sigma_hi);

  if (policy.cutmix && batch_size >= 2 && rng.bernoulli(policy.p_cutmix)) {
    const int h = view.dim(1), w = view.dim(2);
    CutMixRecord cm;
    cm.partner_index =
        (self_index + 1 + static_cast<int>(rng.range(static_cast<uint32_t>(batch_size - 1)))) %
        batch_size;
    const double area = static_cast<double>(h) * w;
    cm.h = std::max(1, static_cast<int>(std::lround(rng.uniform_in(0.35, 0.7) * h)));
    const int w_lo = std::min(w, std::max(1, static_cast<int>(std::ceil(0.10 * area / cm.h))));
    const int w_hi = std::min(w, std::max(w_lo, static_cast<int>(std::floor(0.50 * area / cm.h))));
    cm.w = w_lo + static_cast<int>(rng.range(static_cast<uint32_t>(w_hi - w_lo + 1)));
    cm.top = static_cast<int>(rng.range(static_cast<uint32_t>(h - cm.h + 1)));
    cm.left = static_cast<int>(rng.range(static_cast<uint32_t>(w - cm.w + 1)));
    rec.cutmix = cm;
  }
  return {apply_strong_appearance(view, rec), rec};
}

// Pastes CutMix boxes between the appearance-augmented views of one batch.
// Sources are pre-paste snapshots, so chained mixing cannot occur.
template <typename S>
void apply_cutmix_images(std::vector<Tensor<S>>& images, const std::vector<StrongRecord>& recs) {
  check(images.size() == recs.size(), "apply_cutmix_images: size mismatch");
  const std::vector<Tensor<S>> snapshot = images;
  for (size_t i = 0; i < images.size(); ++i) {
    if (!recs[i].cutmix) continue;
    const CutMixRecord& cm = *recs[i].cutmix;
    check(cm.partner_index >= 0 && cm.partner_index < static_cast<int>(images.size()) &&
              cm.partner_index != static_cast<int>(i),
          "apply_cutmix_images: bad partner index");
    const Tensor<S>& src = snapshot[static_cast<size_t>(cm.partner_index)];
    for (int c = 0; c < images[i].dim(0); ++c)
      for (int y = cm.top; y < cm.top + cm.h; ++y)
        for (int x = cm.left; x < cm.left + cm.w; ++x)
          images[i].at(c, y, x) = src.at(c, y, x);
  }
}

// Aligns a pseudo-label/confidence pair with a strong view. Appearance-only
// records leave both untouched; a CutMix record replaces the box with the
// partner's values.
inline std::pair<LabelMask, BinaryMask> align_pseudo(const LabelMask& pseudo,
                                                     const BinaryMask& conf,
                                                     const StrongRecord& own_record,
                                                     const LabelMask& partner_pseudo,
                                                     const BinaryMask& partner_conf) {
  check(pseudo.h == conf.h && pseudo.w == conf.w, "align_pseudo: mask shape mismatch");
  check(partner_pseudo.h == pseudo.h && partner_pseudo.w == pseudo.w &&
            partner_conf.h == conf.h && partner_conf.w == conf.w,
        "align_pseudo: partner shape mismatch");
  if (!own_record.cutmix) return {pseudo, conf};
  const CutMixRecord& cm = *own_record.cutmix;
  check(cm.top >= 0 && cm.left >= 0 && cm.top + cm.h <= pseudo.h && cm.left + cm.w <= pseudo.w,
        "align_pseudo: cutmix box outside mask bounds");
  LabelMask label = pseudo;
  BinaryMask out_conf = conf;
  for (int y = cm.top; y < cm.top + cm.h; ++y)
    for (int x = cm.left; x < cm.left + cm.w; ++x) {
      label.at(y, x) = partner_pseudo.at(y, x);
      out_conf.at(y, x) = partner_conf.at(y, x);
    }
  return {label, out_conf};
}

// Pixels of the weak view that were padding (no source pixel) carry no
// usable teacher signal: their confidence is forced to 0.
inline void zero_conf_outside_view(PseudoPack& pack, const WeakRecord& rec, int orig_h,
                                   int orig_w) {
  const int rh = std::max(1, static_cast<int>(std::lround(orig_h * rec.scale)));
  const int rw = std::max(1, static_cast<int>(std::lround(orig_w * rec.scale)));
  for (int y = 0; y < pack.conf.h; ++y) {
    const int sy = y + rec.top;
    for (int x = 0; x < pack.conf.w; ++x) {
      const int pre_flip_x = rec.flip ? pack.conf.w - 1 - x : x;
      const int sx = pre_flip_x + rec.left;
      if (sy < 0 || sy >= rh || sx < 0 || sx >= rw) pack.conf.at(y, x) = 0;
    }
  }
}

}  // namespace wps

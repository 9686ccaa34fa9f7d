#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "wps/common.hpp"
#include "wps/config.hpp"
#include "wps/datagen.hpp"
#include "wps/image_ops.hpp"
#include "wps/model.hpp"

namespace wps {

// counts[gt][pred]; pixels with gt == 255 land in `ignored`, so
// sum(counts) + ignored is always the number of evaluated pixels.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<uint64_t> counts;
  uint64_t ignored = 0;

  explicit ConfusionMatrix(int c = 0)
      : num_classes(c), counts(static_cast<size_t>(c) * c, 0) {}

  uint64_t& at(int gt, int pred) { return counts[static_cast<size_t>(gt) * num_classes + pred]; }
  uint64_t at(int gt, int pred) const {
    return counts[static_cast<size_t>(gt) * num_classes + pred];
  }

  void add(uint8_t gt, uint8_t pred) {
    if (gt == kIgnoreLabel) {
      ++ignored;
      return;
    }
    check(gt < num_classes && pred < num_classes, "ConfusionMatrix: class id out of range");
    ++at(gt, pred);
  }

  void merge(const ConfusionMatrix& o) {
    check(num_classes == o.num_classes, "ConfusionMatrix: merge size mismatch");
    for (size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    ignored += o.ignored;
  }

  uint64_t total() const {
    uint64_t t = ignored;
    for (uint64_t c : counts) t += c;
    return t;
  }
};

struct ClassMetric {
  bool included = false;  // false when TP+FP+FN == 0
  double iou = 0.0;
  double dice = 0.0;
};

struct Metrics {
  double miou = 0.0;
  double mdice = 0.0;
  std::vector<ClassMetric> per_class;
};

// IoU_k = TP/(TP+FP+FN), Dice_k = 2TP/(2TP+FP+FN); zero-denominator classes
// are excluded from both means.
inline Metrics miou_mdice(const ConfusionMatrix& cm) {
  Metrics m;
  m.per_class.resize(static_cast<size_t>(cm.num_classes));
  double iou_sum = 0.0, dice_sum = 0.0;
  int included = 0;
  for (int k = 0; k < cm.num_classes; ++k) {
    const double tp = static_cast<double>(cm.at(k, k));
    double fp = 0.0, fn = 0.0;
    for (int j = 0; j < cm.num_classes; ++j) {
      if (j == k) continue;
      fp += static_cast<double>(cm.at(j, k));
      fn += static_cast<double>(cm.at(k, j));
    }
    ClassMetric& c = m.per_class[static_cast<size_t>(k)];
    if (tp + fp + fn == 0.0) continue;
    c.included = true;
    c.iou = tp / (tp + fp + fn);
    c.dice = 2.0 * tp / (2.0 * tp + fp + fn);
    iou_sum += c.iou;
    dice_sum += c.dice;
    ++included;
  }
  if (included == 0)
    throw ValidationError("miou_mdice: every class has an empty denominator, metrics undefined");
  m.miou = iou_sum / included;
  m.mdice = dice_sum / included;
  return m;
}

// softmax(decode(encode(img))). Pure: identical inputs give identical maps.
template <typename S>
Tensor<S> predict(const ParamSet<S>& params, const Tensor<S>& img) {
  return softmax(decode(params, encode(params, img)));
}

namespace detail {

inline int round_even(double x) {
  int r = static_cast<int>(std::lround(x / 2.0)) * 2;
  return r < 2 ? 2 : r;
}

}  // namespace detail

// Mean-of-probabilities fusion over (flip, scale) views. Probability maps
// are resized back bilinearly and renormalized per pixel.
template <typename S>
Tensor<S> tta_predict(const ParamSet<S>& params, const Tensor<S>& img, const TTAPolicy& policy) {
  policy.validate();
  const int h = img.dim(1), w = img.dim(2);
  const bool identity_only = !policy.hflip && policy.scales.size() == 1 &&
                             detail::round_even(h * policy.scales[0]) == h &&
                             detail::round_even(w * policy.scales[0]) == w;
  if (identity_only) return predict(params, img);

  Tensor<S> acc(params.num_classes, h, w);
  int views = 0;
  for (int flip = 0; flip < (policy.hflip ? 2 : 1); ++flip) {
    for (double scale : policy.scales) {
      const int rh = detail::round_even(h * scale);
      const int rw = detail::round_even(w * scale);
      Tensor<S> view = resize_bilinear(img, rh, rw);
      if (flip) view = hflip(view);
      Tensor<S> probs = predict(params, view);
      if (flip) probs = hflip(probs);
      probs = resize_bilinear(probs, h, w);
      const S* p = probs.data();
      S* a = acc.data();
      for (int64_t i = 0; i < acc.size(); ++i) a[i] += p[i];
      ++views;
    }
  }
  const int64_t plane = static_cast<int64_t>(h) * w;
  S* a = acc.data();
  for (int64_t i = 0; i < acc.size(); ++i) a[i] /= static_cast<S>(views);
  // bilinear prob resize is convex per sample but the per-pixel sum can
  // drift; renormalize exactly
  for (int64_t u = 0; u < plane; ++u) {
    S sum = S(0);
    for (int k = 0; k < params.num_classes; ++k) sum += a[u + k * plane];
    for (int k = 0; k < params.num_classes; ++k) a[u + k * plane] /= sum;
  }
  return acc;
}

template <typename S>
LabelMask argmax_labels(const Tensor<S>& probs) {
  const int c = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
  LabelMask out(h, w);
  const int64_t plane = static_cast<int64_t>(h) * w;
  const S* p = probs.data();
  for (int64_t u = 0; u < plane; ++u) {
    int best = 0;
    S best_p = p[u];
    for (int k = 1; k < c; ++k)
      if (p[u + k * plane] > best_p) {
        best_p = p[u + k * plane];
        best = k;
      }
    out.v[static_cast<size_t>(u)] = static_cast<uint8_t>(best);
  }
  return out;
}

inline void accumulate_confusion(ConfusionMatrix& cm, const LabelMask& gt,
                                 const LabelMask& pred) {
  check(gt.h == pred.h && gt.w == pred.w, "accumulate_confusion: shape mismatch");
  for (int64_t i = 0; i < gt.size(); ++i)
    cm.add(gt.v[static_cast<size_t>(i)], pred.v[static_cast<size_t>(i)]);
}

struct EvalOptions {
  bool use_degraded = true;  // evaluate on the degraded half of each pair
  bool tta = false;
  TTAPolicy tta_policy;
  int threads = 1;
};

// Confusion over a whole scene list. Parallel across images; matrices merge
// in index order (integer-exact either way).
template <typename S>
ConfusionMatrix evaluate_scenes(const ParamSet<S>& params, std::span<const Scene> scenes,
                                const EvalOptions& opts) {
  check(!scenes.empty(), "evaluate_scenes: empty scene list");
  std::vector<ConfusionMatrix> partial(scenes.size());
  parallel_for(static_cast<int64_t>(scenes.size()), opts.threads, [&](int64_t i) {
    const Scene& s = scenes[static_cast<size_t>(i)];
    Tensor<S> img = (opts.use_degraded ? s.degraded : s.clean).template cast<S>();
    Tensor<S> probs =
        opts.tta ? tta_predict(params, img, opts.tta_policy) : predict(params, img);
    ConfusionMatrix cm(static_cast<int>(s.num_classes));
    accumulate_confusion(cm, s.label, argmax_labels(probs));
    partial[static_cast<size_t>(i)] = std::move(cm);
  });
  ConfusionMatrix total(static_cast<int>(scenes.front().num_classes));
  for (const ConfusionMatrix& cm : partial) total.merge(cm);
  return total;
}

// Raw-mask dump for external viewing: binary PGM, class ids as gray levels.
inline void write_pgm(const LabelMask& mask, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("write_pgm: cannot open " + path);
  out << "P5\n" << mask.w << " " << mask.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(mask.v.data()),
            static_cast<std::streamsize>(mask.v.size()));
  if (!out) throw IoError("write_pgm: short write to " + path);
}

}  // namespace wps

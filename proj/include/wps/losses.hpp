#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>

#include "wps/common.hpp"
#include "wps/tensor.hpp"

namespace wps {

// Floor applied to any probability before a log; caps the per-pixel CE so a
// saturated wrong prediction stays finite.
constexpr double kProbFloor = 1e-12;
inline double ce_cap() { return -std::log(kProbFloor); }

// Teacher output thresholded at tau: the argmax map plus the per-pixel
// confidence bit max_c p_c(u) >= tau.
struct PseudoPack {
  LabelMask label;
  BinaryMask conf;
  double tau = 0.0;
};

struct LossReport {
  double supervised = 0.0;
  double unsupervised = 0.0;
  double total = 0.0;
  double weight = 0.0;              // lambda applied to the unsupervised term
  double confident_fraction = 0.0;  // mean of confidence bits this step
};

// Denominator convention for the unsupervised loss. AllPixels divides by
// 2*B*|Omega| (unconfident pixels dilute the loss); ConfidentPixels divides
// by the number of confident terms instead.
enum class LdNormalize { AllPixels, ConfidentPixels };

// Per-image masked cross-entropy over logits (C x H x W), stabilized via
// log-sum-exp. Pixels are active when label != 255 and (conf missing or 1).
// Returns the sum of capped per-pixel CE; active pixel count goes to
// *active. When glogits is given, accumulates grad_scale * d(sum)/dlogits
// (zero at capped pixels, matching the capped loss).
template <typename S>
double masked_ce_sum(const Tensor<S>& logits, const LabelMask& labels, const BinaryMask* conf,
                     Tensor<S>* glogits, double grad_scale, int64_t* active) {
  const int c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  check(labels.h == h && labels.w == w, "masked_ce_sum: label shape mismatch");
  if (conf) check(conf->h == h && conf->w == w, "masked_ce_sum: confidence shape mismatch");
  if (glogits) check(glogits->same_shape(logits), "masked_ce_sum: gradient shape mismatch");

  const double cap = ce_cap();
  const int64_t plane = static_cast<int64_t>(h) * w;
  double sum = 0.0;
  int64_t n = 0;
  const S* base = logits.data();
  S* gbase = glogits ? glogits->data() : nullptr;
  for (int64_t u = 0; u < plane; ++u) {
    const uint8_t y = labels.v[static_cast<size_t>(u)];
    if (y == kIgnoreLabel) continue;
    if (y >= c)
      throw ValidationError("masked_ce_sum: label " + std::to_string(int(y)) +
                            " out of range for " + std::to_string(c) + " classes");
    if (conf && conf->v[static_cast<size_t>(u)] == 0) continue;
    ++n;

    S m = base[u];
    for (int k = 1; k < c; ++k) m = std::max(m, base[u + k * plane]);
    S sumexp = S(0);
    for (int k = 0; k < c; ++k) sumexp += std::exp(base[u + k * plane] - m);
    const S lse = m + std::log(sumexp);
    const double ce = static_cast<double>(lse - base[u + y * plane]);
    if (ce >= cap) {
      sum += cap;
      continue;  // capped pixel: flat loss, zero gradient
    }
    sum += ce;
    if (gbase) {
      const S scale = static_cast<S>(grad_scale);
      for (int k = 0; k < c; ++k) {
        S p = std::exp(base[u + k * plane] - lse);
        if (k == y) p -= S(1);
        gbase[u + k * plane] += scale * p;
      }
    }
  }
  if (active) *active = n;
  return sum;
}

// Mean CE over the non-ignored pixels of a clean batch. 255-labeled pixels
// contribute to neither numerator nor denominator.
template <typename S>
double supervised_loss(std::span<const Tensor<S>> logits, std::span<const LabelMask> labels) {
  check(logits.size() == labels.size() && !logits.empty(),
        "supervised_loss: batch size mismatch or empty batch");
  double sum = 0.0;
  int64_t valid = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    int64_t n = 0;
    sum += masked_ce_sum<S>(logits[i], labels[i], nullptr, nullptr, 0.0, &n);
    valid += n;
  }
  return valid > 0 ? sum / static_cast<double>(valid) : 0.0;
}

// Argmax pseudo-label with deterministic tie-break (lowest class index) and
// the tau confidence indicator.
template <typename S>
PseudoPack make_pseudo(const Tensor<S>& probs, double tau) {
  check(tau > 0.0 && tau <= 1.0, "make_pseudo: tau must be in (0,1]");
  const int c = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
  PseudoPack pack;
  pack.label = LabelMask(h, w);
  pack.conf = BinaryMask(h, w);
  pack.tau = tau;
  const int64_t plane = static_cast<int64_t>(h) * w;
  const S* base = probs.data();
  for (int64_t u = 0; u < plane; ++u) {
    double sum = 0.0;
    int best = 0;
    S best_p = base[u];
    for (int k = 0; k < c; ++k) {
      const S p = base[u + k * plane];
      sum += p;
      if (p > best_p) {  // strict: first max wins
        best_p = p;
        best = k;
      }
    }
    if (std::fabs(sum - 1.0) > 1e-4)
      throw NumericError("make_pseudo: probabilities at pixel " + std::to_string(u) +
                         " sum to " + std::to_string(sum) + ", not 1");
    pack.label.v[static_cast<size_t>(u)] = static_cast<uint8_t>(best);
    pack.conf.v[static_cast<size_t>(u)] =
        static_cast<uint8_t>(static_cast<double>(best_p) >= tau ? 1 : 0);
  }
  return pack;
}

inline int64_t confident_count(std::span<const PseudoPack> packs) {
  int64_t n = 0;
  for (const PseudoPack& p : packs)
    for (uint8_t b : p.conf.v) n += b;
  return n;
}

// Confidence-gated CE of both strong views against their aligned pseudo
// labels, divided by 2*B*|Omega| (or by the confident count when so
// configured).
template <typename S>
double unsupervised_loss(std::span<const Tensor<S>> logits1, std::span<const Tensor<S>> logits2,
                         std::span<const PseudoPack> packs1, std::span<const PseudoPack> packs2,
                         LdNormalize norm = LdNormalize::AllPixels) {
  check(logits1.size() == logits2.size() && logits1.size() == packs1.size() &&
            packs1.size() == packs2.size() && !logits1.empty(),
        "unsupervised_loss: batch size mismatch or empty batch");
  const int64_t plane = static_cast<int64_t>(logits1[0].dim(1)) * logits1[0].dim(2);
  double sum = 0.0;
  for (size_t i = 0; i < logits1.size(); ++i) {
    sum += masked_ce_sum<S>(logits1[i], packs1[i].label, &packs1[i].conf, nullptr, 0.0, nullptr);
    sum += masked_ce_sum<S>(logits2[i], packs2[i].label, &packs2[i].conf, nullptr, 0.0, nullptr);
  }
  double denom;
  if (norm == LdNormalize::AllPixels) {
    denom = 2.0 * static_cast<double>(logits1.size()) * static_cast<double>(plane);
  } else {
    denom = static_cast<double>(confident_count(packs1) + confident_count(packs2));
  }
  return denom > 0.0 ? sum / denom : 0.0;
}

// L = L_c + lambda * L_d, reported with the exact same-precision sum.
inline LossReport total_loss(double l_c, double l_d, double lambda) {
  if (!std::isfinite(l_c) || !std::isfinite(l_d))
    throw NumericError("total_loss: non-finite input (l_c=" + std::to_string(l_c) +
                       ", l_d=" + std::to_string(l_d) + ")");
  check(lambda >= 0.0, "total_loss: lambda must be >= 0");
  LossReport r;
  r.supervised = l_c;
  r.unsupervised = l_d;
  r.weight = lambda;
  r.total = l_c + lambda * l_d;
  return r;
}

}  // namespace wps

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "wps/augment.hpp"
#include "wps/datagen.hpp"
#include "wps/losses.hpp"
#include "wps/model.hpp"
#include "wps/shard.hpp"

namespace wps {

struct SelfCheckOptions {
  // Test hook: corrupts one analytic gradient entry so the gradient check
  // must fail loudly.
  bool inject_gradient_fault = false;
  std::string scratch_dir = ".";
};

namespace detail {

struct CheckOutcome {
  std::string name;
  bool pass = false;
  std::string info;
};

// Small double-precision semi batch on an 8x8 crop.
inline TrainBatch<double> selfcheck_batch(int classes, uint64_t seed) {
  const int hw = 8;
  Rng rng(seed);
  TrainBatch<double> batch;
  auto random_image = [&]() {
    Tensor<double> img(3, hw, hw);
    for (int64_t i = 0; i < img.size(); ++i) img[i] = rng.uniform();
    return img;
  };
  batch.clean_images.push_back(random_image());
  LabelMask label(hw, hw);
  for (auto& v : label.v) v = static_cast<uint8_t>(rng.range(static_cast<uint32_t>(classes)));
  label.at(0, 0) = kIgnoreLabel;
  batch.clean_labels.push_back(label);

  for (int v = 0; v < 2; ++v) {
    (v == 0 ? batch.strong1 : batch.strong2).push_back(random_image());
    PseudoPack pack;
    pack.label = LabelMask(hw, hw);
    pack.conf = BinaryMask(hw, hw);
    pack.tau = 0.95;
    for (auto& x : pack.label.v) x = static_cast<uint8_t>(rng.range(static_cast<uint32_t>(classes)));
    for (auto& x : pack.conf.v) x = rng.bernoulli(0.7) ? 1 : 0;
    (v == 0 ? batch.packs1 : batch.packs2).push_back(std::move(pack));
  }
  auto masks = sample_complementary_masks(rng, 0.5);
  batch.drop1.push_back(masks.first);
  batch.drop2.push_back(masks.second);
  return batch;
}

inline CheckOutcome check_gradients(const SelfCheckOptions& opts) {
  CheckOutcome out{"gradient-check", false, ""};
  const int classes = 4;
  ParamSet<double> params = ParamSet<double>::init(classes, 1234);
  const TrainBatch<double> batch = selfcheck_batch(classes, 99);
  LossSpec spec;

  ParamSet<double> grads;
  forward_backward(params, batch, spec, grads, 1);
  if (opts.inject_gradient_fault) grads.enc_conv2_w[0] += 0.25;  // checked entry

  const double eps = 1e-3;
  double max_rel = 0.0;
  std::string worst;
  ParamSet<double> probe = params;
  Tensor<double>* probe_t[10];
  const Tensor<double>* grad_t[10];
  int i = 0;
  probe.for_each([&](std::string_view, Tensor<double>& t) { probe_t[i++] = &t; });
  i = 0;
  grads.for_each([&](std::string_view, const Tensor<double>& t) { grad_t[i++] = &t; });

  i = 0;
  params.for_each([&](std::string_view name, const Tensor<double>& t) {
    const int idx = i++;
    // deterministic subset: every tensor contributes up to 24 entries
    const int64_t stride = std::max<int64_t>(1, t.size() / 24);
    for (int64_t k = 0; k < t.size(); k += stride) {
      Tensor<double>& pt = *probe_t[idx];
      const double saved = pt[k];
      ParamSet<double> scratch;
      const double an = (*grad_t[idx])[k];
      auto fd_at = [&](double h) {
        pt[k] = saved + h;
        const double lp = forward_backward(probe, batch, spec, scratch, 1).total;
        pt[k] = saved - h;
        const double lm = forward_backward(probe, batch, spec, scratch, 1).total;
        pt[k] = saved;
        return (lp - lm) / (2.0 * h);
      };
      double fd = fd_at(eps);
      double rel = std::fabs(an - fd) / std::max({std::fabs(an), std::fabs(fd), 1e-4});
      // a ReLU kink inside +-eps corrupts the quotient, not the gradient;
      // re-verify at smaller steps before judging
      if (rel >= 1e-4) {
        for (double h : {eps / 100.0, eps / 1000.0}) {
          fd = fd_at(h);
          rel = std::fabs(an - fd) / std::max({std::fabs(an), std::fabs(fd), 1e-4});
          if (rel < 1e-4) break;
        }
      }
      if (rel > max_rel) {
        max_rel = rel;
        worst = std::string(name) + "[" + std::to_string(k) + "]";
      }
    }
  });
  char buf[128];
  std::snprintf(buf, sizeof(buf), "max rel err %.3e at %s (tol 1e-4)", max_rel, worst.c_str());
  out.info = buf;
  out.pass = max_rel < 1e-4;
  return out;
}

inline CheckOutcome check_loss_oracle() {
  CheckOutcome out{"loss-oracle", false, ""};
  const int classes = 5, hw = 8;
  Rng rng(7);
  Tensor<double> logits(classes, hw, hw);
  for (int64_t i = 0; i < logits.size(); ++i) logits[i] = rng.uniform_in(-3.0, 3.0);
  LabelMask label(hw, hw);
  for (auto& v : label.v) v = static_cast<uint8_t>(rng.range(classes));
  label.at(3, 3) = kIgnoreLabel;

  const std::vector<Tensor<double>> lv{logits};
  const std::vector<LabelMask> yv{label};
  const double got = supervised_loss<double>(lv, yv);

  // independent scalar loop: naive softmax, -log(clamped prob)
  double ref_sum = 0.0;
  int ref_n = 0;
  for (int y = 0; y < hw; ++y)
    for (int x = 0; x < hw; ++x) {
      if (label.at(y, x) == kIgnoreLabel) continue;
      double denom = 0.0;
      for (int k = 0; k < classes; ++k) denom += std::exp(logits.at(k, y, x));
      const double p = std::exp(logits.at(label.at(y, x), y, x)) / denom;
      ref_sum += -std::log(std::max(p, kProbFloor));
      ++ref_n;
    }
  const double ref = ref_sum / ref_n;
  const double err = std::fabs(got - ref);
  char buf[96];
  std::snprintf(buf, sizeof(buf), "|impl - scalar loop| = %.3e (tol 1e-10)", err);
  out.info = buf;
  out.pass = err < 1e-10;
  return out;
}

inline CheckOutcome check_ema() {
  CheckOutcome out{"ema-arithmetic", false, ""};
  ParamSet<double> teacher = ParamSet<double>::zeros(3);
  ParamSet<double> student = ParamSet<double>::zeros(3);
  teacher.fill(1.0);
  student.fill(0.5);
  ema_update(teacher, student, 0.99);
  const double probe = teacher.enc_conv1_w[0];
  bool ok = std::fabs(probe - 0.995) < 1e-15;
  // geometric decay: |t_k - s| = gamma^k * |t_0 - s|, 0.495 after the probe
  double expect = 0.495;
  for (int k = 0; k < 100; ++k) {
    ema_update(teacher, student, 0.99);
    expect *= 0.99;
  }
  const double err = std::fabs((teacher.enc_conv1_w[0] - 0.5) - expect);
  ok = ok && err < 1e-12 && std::fabs(student.enc_conv1_w[0] - 0.5) == 0.0;
  char buf[96];
  std::snprintf(buf, sizeof(buf), "probe %.6f, decay err %.3e", probe, err);
  out.info = buf;
  out.pass = ok;
  return out;
}

inline CheckOutcome check_dropout() {
  CheckOutcome out{"dropout-complementarity", false, ""};
  Rng rng(11);
  bool ok = true;
  for (int trial = 0; trial < 200 && ok; ++trial) {
    auto [m1, m2] = sample_complementary_masks(rng, 0.5);
    for (size_t k = 0; k < m1.bits.size(); ++k)
      if ((m1.bits[k] ^ m2.bits[k]) != 1) ok = false;
  }
  Tensor<double> feat(kFeatureChannels, 2, 2);
  for (int64_t i = 0; i < feat.size(); ++i) feat[i] = rng.uniform_in(0.5, 1.0);
  Tensor<double> mean(kFeatureChannels, 2, 2);
  const int draws = 2000;
  for (int d = 0; d < draws; ++d) {
    auto [m1, m2] = sample_complementary_masks(rng, 0.5);
    const Tensor<double> dropped = apply_channel_dropout(feat, m1);
    for (int64_t i = 0; i < mean.size(); ++i) mean[i] += dropped[i] / draws;
  }
  double worst = 0.0;
  for (int64_t i = 0; i < mean.size(); ++i)
    worst = std::max(worst, std::fabs(mean[i] - feat[i]) / feat[i]);
  ok = ok && worst < 0.15;
  char buf[96];
  std::snprintf(buf, sizeof(buf), "XOR exact, mean(2M*e) off by %.3f (tol 0.15)", worst);
  out.info = buf;
  out.pass = ok;
  return out;
}

inline CheckOutcome check_shard_roundtrip(const SelfCheckOptions& opts) {
  CheckOutcome out{"shard-round-trip", false, ""};
  std::vector<Scene> scenes;
  for (uint64_t s = 0; s < 3; ++s) scenes.push_back(generate_scene(s + 500, 32, 32, 4));
  const std::string path =
      (std::filesystem::path(opts.scratch_dir) / "selfcheck_tmp.shard").string();
  write_shard(scenes, path);
  const std::vector<Scene> back = read_shard(path);
  std::filesystem::remove(path);
  bool ok = back.size() == scenes.size();
  for (size_t i = 0; ok && i < scenes.size(); ++i)
    ok = back[i].clean == scenes[i].clean && back[i].degraded == scenes[i].degraded &&
         back[i].label == scenes[i].label && back[i].seed == scenes[i].seed;
  out.info = ok ? "3 scenes bit-identical" : "mismatch after round trip";
  out.pass = ok;
  return out;
}

}  // namespace detail

// Fast invariant suite behind `selfcheck`. Prints one line per check.
inline bool run_selfcheck(std::ostream& os, const SelfCheckOptions& opts = {}) {
  std::vector<detail::CheckOutcome> results;
  results.push_back(detail::check_gradients(opts));
  results.push_back(detail::check_loss_oracle());
  results.push_back(detail::check_ema());
  results.push_back(detail::check_dropout());
  results.push_back(detail::check_shard_roundtrip(opts));
  bool all = true;
  for (const auto& r : results) {
    os << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.info << "\n";
    all = all && r.pass;
  }
  os << (all ? "selfcheck: all checks passed\n" : "selfcheck: FAILURES detected\n");
  return all;
}

}  // namespace wps

#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "wps/augment.hpp"
#include "wps/checkpoint.hpp"
#include "wps/config.hpp"
#include "wps/datagen.hpp"
#include "wps/evaluate.hpp"
#include "wps/model.hpp"

namespace wps {

// Scene store with an instrumented accessor: clean-only training must never
// touch a degraded tensor, and the counter makes that checkable.
class TrainData {
public:
  explicit TrainData(std::vector<Scene> scenes) : scenes_(std::move(scenes)) {
    check(!scenes_.empty(), "TrainData: empty scene list");
    const Scene& first = scenes_.front();
    for (const Scene& s : scenes_)
      check(s.clean.dim(1) == first.clean.dim(1) && s.clean.dim(2) == first.clean.dim(2) &&
                s.num_classes == first.num_classes,
            "TrainData: scenes disagree on (C,H,W)");
  }

  size_t size() const { return scenes_.size(); }
  int height() const { return scenes_.front().clean.dim(1); }
  int width() const { return scenes_.front().clean.dim(2); }
  int num_classes() const { return static_cast<int>(scenes_.front().num_classes); }

  const Tensor<float>& clean(size_t i) const { return scenes_[i].clean; }
  const LabelMask& label(size_t i) const { return scenes_[i].label; }
  const Tensor<float>& degraded(size_t i) const {
    degraded_reads_.fetch_add(1, std::memory_order_relaxed);
    return scenes_[i].degraded;
  }

  const std::vector<Scene>& scenes() const { return scenes_; }
  uint64_t degraded_reads() const { return degraded_reads_.load(); }

private:
  std::vector<Scene> scenes_;
  mutable std::atomic<uint64_t> degraded_reads_{0};
};

struct StepTrace {
  uint64_t step = 0;
  uint32_t epoch = 0;
  LossReport report;
  bool ema_applied = false;
  double lr_used = 0.0;
};

struct TrainOutput {
  ParamSet<float> student, teacher, momentum;
  uint64_t steps = 0;
  double last_val_miou = -1.0;
};

// v <- momentum * v + g; p <- p - lr_group * v. Decoder tensors step with
// lr * head_lr_mult; frozen encoder tensors (and their momentum) stay put.
template <typename S>
void sgd_step(ParamSet<S>& params, const ParamSet<S>& grads, ParamSet<S>& momentum, double lr,
              double head_lr_mult, double momentum_coef, bool freeze_encoder) {
  check(params.same_shape(grads) && params.same_shape(momentum),
        "sgd_step: parameter/gradient shape mismatch");
  const Tensor<S>* g[10];
  Tensor<S>* v[10];
  int i = 0;
  grads.for_each([&](std::string_view, const Tensor<S>& t) { g[i++] = &t; });
  i = 0;
  momentum.for_each([&](std::string_view, Tensor<S>& t) { v[i++] = &t; });
  i = 0;
  params.for_each([&](std::string_view name, Tensor<S>& p) {
    const int idx = i++;
    const bool encoder = is_encoder_param(name);
    if (freeze_encoder && encoder) return;
    const S lr_group = static_cast<S>(encoder ? lr : lr * head_lr_mult);
    const S mc = static_cast<S>(momentum_coef);
    S* vp = v[idx]->data();
    const S* gp = g[idx]->data();
    S* pp = p.data();
    for (int64_t k = 0; k < p.size(); ++k) {
      vp[k] = mc * vp[k] + gp[k];
      pp[k] -= lr_group * vp[k];
    }
  });
}

inline double poly_lr(double base, uint64_t step, uint64_t total_steps) {
  const double frac = total_steps > 0 ? static_cast<double>(step) / total_steps : 0.0;
  return base * std::pow(1.0 - frac, 0.9);
}

namespace detail {

inline std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace detail

using StepObserver =
    std::function<void(const StepTrace&, const ParamSet<float>&, const ParamSet<float>&)>;

// The full teacher-student loop. Per step: weak-augment a clean batch for
// the supervised loss; in semi mode run the EMA teacher over weak degraded
// views to mint confidence-gated pseudo labels, build two strong views per
// image with a complementary channel-dropout pair, and add the consistency
// loss; SGD step with poly decay; EMA update. All randomness is keyed by
// (seed, stream, epoch, step, sample, view), so runs are bit-reproducible.
inline TrainOutput train(const TrainConfig& cfg, const TrainData& data, const TrainData* val,
                         const std::string& ckpt_path, const std::string& csv_path,
                         const Checkpoint* resume = nullptr, std::ostream* log = nullptr,
                         const StepObserver& observer = nullptr) {
  cfg.validate();
  const int classes = data.num_classes();
  const size_t n = data.size();
  const uint64_t steps_per_epoch = std::max<uint64_t>(1, n / static_cast<size_t>(cfg.batch_degraded));
  const uint64_t total_steps = steps_per_epoch * static_cast<uint64_t>(cfg.epochs);
  const int threads = cfg.deterministic ? worker_count() : worker_count();
  const std::string cfg_json = config_echo(cfg);

  TrainOutput out;
  uint64_t start_step = 0;
  if (resume) {
    check(resume->student.num_classes == classes,
          "train: checkpoint classes disagree with shard");
    out.student = resume->student;
    out.teacher = resume->teacher;
    out.momentum = resume->momentum;
    start_step = resume->step;
  } else {
    out.student = ParamSet<float>::init(classes, cfg.seed);
    out.teacher = out.student;  // teacher starts as an exact copy
    out.momentum = ParamSet<float>::zeros(classes);
  }

  if (cfg.keep_prob != 0.5 && log)
    *log << "[train] note: keep_prob=" << cfg.keep_prob
         << " makes the x2 dropout rescale biased (unbiased only at 0.5)\n";

  std::ofstream csv;
  if (!csv_path.empty()) {
    const bool append = resume != nullptr && std::filesystem::exists(csv_path);
    csv.open(csv_path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw IoError("train: cannot open metrics log " + csv_path);
    if (!append) {
      csv << "# config: " << cfg_json << "\n";
      csv << "step,epoch,l_c,l_d,total,confident_fraction,lr,val_miou\n";
    }
  }

  LossSpec spec;
  spec.unsup_weight = cfg.unsup_weight;
  spec.norm = cfg.ld_normalize;
  spec.freeze_encoder = cfg.freeze_encoder;

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  uint64_t shuffled_epoch = UINT64_MAX;

  const int crop = cfg.crop;
  for (uint64_t gstep = start_step; gstep < total_steps; ++gstep) {
    const uint64_t epoch = gstep / steps_per_epoch;
    const uint64_t sstep = gstep % steps_per_epoch;

    TrainBatch<float> batch;
    Rng pick(derive_seed(cfg.seed, {kStreamCleanPick, epoch, sstep}));
    for (int i = 0; i < cfg.batch_clean; ++i) {
      const size_t idx = pick.range(static_cast<uint32_t>(n));
      Rng weak_rng(derive_seed(cfg.seed, {kStreamWeakClean, epoch, sstep, static_cast<uint64_t>(i)}));
      WeakView<float> view = weak_augment<float>(data.clean(idx), &data.label(idx), weak_rng, crop);
      batch.clean_images.push_back(std::move(view.image));
      batch.clean_labels.push_back(std::move(*view.label));
    }

    const bool unsup_active =
        cfg.mode == TrainMode::Semi && gstep >= static_cast<uint64_t>(cfg.burnin_steps);
    if (unsup_active) {
      if (epoch != shuffled_epoch) {
        std::iota(order.begin(), order.end(), size_t{0});
        Rng shuffle_rng(derive_seed(cfg.seed, {kStreamShuffle, epoch}));
        for (size_t i = n - 1; i > 0; --i) {
          const size_t j = shuffle_rng.range(static_cast<uint32_t>(i + 1));
          std::swap(order[i], order[j]);
        }
        shuffled_epoch = epoch;
      }
      const int bd = cfg.batch_degraded;
      std::vector<WeakView<float>> weak(static_cast<size_t>(bd));
      for (int i = 0; i < bd; ++i) {
        const size_t idx = order[(sstep * static_cast<uint64_t>(bd) + static_cast<uint64_t>(i)) % n];
        Rng weak_rng(
            derive_seed(cfg.seed, {kStreamWeakDegraded, epoch, sstep, static_cast<uint64_t>(i)}));
        weak[static_cast<size_t>(i)] =
            weak_augment<float>(data.degraded(idx), nullptr, weak_rng, crop);
      }

      // teacher pseudo labels on the weak views (no gradients exist here)
      std::vector<PseudoPack> base_packs(static_cast<size_t>(bd));
      parallel_for(bd, threads, [&](int64_t i) {
        const Tensor<float> probs = predict(out.teacher, weak[static_cast<size_t>(i)].image);
        PseudoPack pack = make_pseudo(probs, cfg.conf_threshold);
        zero_conf_outside_view(pack, weak[static_cast<size_t>(i)].record, data.height(),
                               data.width());
        base_packs[static_cast<size_t>(i)] = std::move(pack);
      });

      for (int v = 0; v < 2; ++v) {
        std::vector<Tensor<float>> images(static_cast<size_t>(bd));
        std::vector<StrongRecord> recs(static_cast<size_t>(bd));
        for (int i = 0; i < bd; ++i) {
          Rng strong_rng(derive_seed(cfg.seed, {kStreamStrong, epoch, sstep,
                                                static_cast<uint64_t>(i), static_cast<uint64_t>(v)}));
          auto [img, rec] = strong_augment<float>(weak[static_cast<size_t>(i)].image, strong_rng,
                                                  cfg.strong, bd, i);
          images[static_cast<size_t>(i)] = std::move(img);
          recs[static_cast<size_t>(i)] = rec;
        }
        apply_cutmix_images(images, recs);
        for (int i = 0; i < bd; ++i) {
          const StrongRecord& rec = recs[static_cast<size_t>(i)];
          const int partner = rec.cutmix ? rec.cutmix->partner_index : static_cast<int>(i);
          auto [label, conf] = align_pseudo(
              base_packs[static_cast<size_t>(i)].label, base_packs[static_cast<size_t>(i)].conf,
              rec, base_packs[static_cast<size_t>(partner)].label,
              base_packs[static_cast<size_t>(partner)].conf);
          PseudoPack aligned{std::move(label), std::move(conf), cfg.conf_threshold};
          if (v == 0) {
            batch.strong1.push_back(std::move(images[static_cast<size_t>(i)]));
            batch.packs1.push_back(std::move(aligned));
          } else {
            batch.strong2.push_back(std::move(images[static_cast<size_t>(i)]));
            batch.packs2.push_back(std::move(aligned));
          }
        }
      }
      for (int i = 0; i < bd; ++i) {
        Rng mask_rng(
            derive_seed(cfg.seed, {kStreamChannelMask, epoch, sstep, static_cast<uint64_t>(i)}));
        auto [m1, m2] = sample_complementary_masks(mask_rng, cfg.keep_prob);
        batch.drop1.push_back(std::move(m1));
        batch.drop2.push_back(std::move(m2));
      }
    }

    StepTrace trace;
    trace.step = gstep;
    trace.epoch = static_cast<uint32_t>(epoch);
    trace.lr_used = poly_lr(cfg.lr, gstep, total_steps);
    ParamSet<float> grads;
    try {
      trace.report = forward_backward(out.student, batch, spec, grads, threads);
    } catch (const NumericError& e) {
      throw NumericError("train: aborted at step " + std::to_string(gstep) + " epoch " +
                         std::to_string(epoch) + ": " + e.what());
    }
    sgd_step(out.student, grads, out.momentum, trace.lr_used, cfg.head_lr_mult, cfg.momentum,
             cfg.freeze_encoder);
    ema_update(out.teacher, out.student, cfg.ema_decay);
    trace.ema_applied = true;
    out.steps = gstep + 1;

    const bool epoch_end = (sstep + 1 == steps_per_epoch);
    std::string val_cell;
    if (epoch_end && val) {
      EvalOptions eopts;
      eopts.use_degraded = true;
      eopts.threads = threads;
      const Metrics m = miou_mdice(evaluate_scenes(out.teacher, val->scenes(), eopts));
      out.last_val_miou = m.miou;
      val_cell = detail::fmt_g(m.miou);
      if (log)
        *log << "[train] epoch " << epoch << " step " << gstep
             << " total " << detail::fmt_g(trace.report.total) << " val_miou " << val_cell
             << "\n";
    }
    if (csv.is_open()) {
      csv << gstep << "," << epoch << "," << detail::fmt_g(trace.report.supervised) << ","
          << detail::fmt_g(trace.report.unsupervised) << "," << detail::fmt_g(trace.report.total)
          << "," << detail::fmt_g(trace.report.confident_fraction) << ","
          << detail::fmt_g(trace.lr_used) << "," << val_cell << "\n";
    }
    if (epoch_end && !ckpt_path.empty())
      save_checkpoint(ckpt_path, gstep + 1, static_cast<uint32_t>(epoch + 1), cfg_json,
                      out.student, out.teacher, out.momentum);
    if (observer) observer(trace, out.student, out.teacher);
  }

  if (!ckpt_path.empty())
    save_checkpoint(ckpt_path, total_steps, static_cast<uint32_t>(cfg.epochs), cfg_json,
                    out.student, out.teacher, out.momentum);
  return out;
}

}  // namespace wps

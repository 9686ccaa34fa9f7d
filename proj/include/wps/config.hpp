#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "wps/augment.hpp"
#include "wps/common.hpp"
#include "wps/losses.hpp"

namespace wps {

using json = nlohmann::json;

enum class TrainMode { CleanOnly, Semi };

inline const char* mode_name(TrainMode m) {
  return m == TrainMode::CleanOnly ? "clean_only" : "semi";
}

inline TrainMode mode_from_name(const std::string& s) {
  if (s == "clean_only") return TrainMode::CleanOnly;
  if (s == "semi") return TrainMode::Semi;
  throw ValidationError("config: mode must be 'clean_only' or 'semi', got '" + s + "'");
}

struct TTAPolicy {
  bool hflip = true;
  std::vector<double> scales = {0.75, 1.0, 1.25};

  // Plain predict == TTA with this policy, bit for bit.
  static TTAPolicy identity() { return TTAPolicy{false, {1.0}}; }

  void validate() const {
    check(!scales.empty(), "tta: at least one scale required");
    for (double s : scales) check(s > 0.0, "tta: scales must be positive");
  }
};

struct RunPaths {
  std::string train_shard;
  std::string val_shard;
  std::string test_shard;
  std::string out_dir = ".";
};

struct TrainConfig {
  double conf_threshold = 0.95;  // pseudo-label gate
  double unsup_weight = 1.0;     // weight of the consistency loss
  double ema_decay = 0.99;
  double lr = 1e-3;
  double head_lr_mult = 1.0;  // decoder learning-rate multiplier
  double momentum = 0.9;
  int batch_clean = 8;
  int batch_degraded = 8;
  int epochs = 60;
  int crop = 64;
  uint64_t seed = 42;
  bool freeze_encoder = false;
  TrainMode mode = TrainMode::Semi;
  bool deterministic = true;
  int burnin_steps = 0;     // supervised-only steps before the consistency branch kicks in
  double keep_prob = 0.5;   // channel-dropout keep probability
  LdNormalize ld_normalize = LdNormalize::AllPixels;
  StrongPolicy strong;
  TTAPolicy tta;
  RunPaths paths;

  void validate() const {
    check(conf_threshold > 0.0 && conf_threshold <= 1.0, "config: conf_threshold in (0,1]");
    check(unsup_weight >= 0.0, "config: unsup_weight >= 0");
    check(ema_decay >= 0.0 && ema_decay < 1.0, "config: ema_decay in [0,1)");
    check(lr > 0.0, "config: lr > 0");
    check(head_lr_mult > 0.0, "config: head_lr_mult > 0");
    check(momentum >= 0.0 && momentum < 1.0, "config: momentum in [0,1)");
    check(batch_clean >= 1 && batch_degraded >= 1, "config: batch sizes >= 1");
    check(epochs >= 1, "config: epochs >= 1");
    check(crop >= 2 && crop % 2 == 0, "config: crop must be even and >= 2");
    check(burnin_steps >= 0, "config: burnin_steps >= 0");
    check(keep_prob > 0.0 && keep_prob < 1.0, "config: keep_prob in (0,1)");
    check(strong.p_jitter >= 0.0 && strong.p_jitter <= 1.0 && strong.p_gray >= 0.0 &&
              strong.p_gray <= 1.0 && strong.p_blur >= 0.0 && strong.p_blur <= 1.0 &&
              strong.p_cutmix >= 0.0 && strong.p_cutmix <= 1.0,
          "config: strong-policy probabilities in [0,1]");
    check(strong.brightness_lo > 0.0 && strong.brightness_hi >= strong.brightness_lo &&
              strong.contrast_lo > 0.0 && strong.contrast_hi >= strong.contrast_lo &&
              strong.blur_sigma_lo > 0.0 && strong.blur_sigma_hi >= strong.blur_sigma_lo,
          "config: strong-policy ranges must be positive and ordered");
    tta.validate();
  }
};

namespace detail {

// Wrapper enforcing the "unknown keys rejected" contract.
class StrictObject {
public:
  StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ValidationError("config: " + where_ + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ValidationError("config: bad value for '" + where_ + key + "': " + e.what());
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        throw ValidationError("config: unknown key '" + where_ + it.key() + "'");
  }

private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json to_json(const StrongPolicy& p) {
  return json{{"p_jitter", p.p_jitter},
              {"brightness_lo", p.brightness_lo},
              {"brightness_hi", p.brightness_hi},
              {"contrast_lo", p.contrast_lo},
              {"contrast_hi", p.contrast_hi},
              {"p_gray", p.p_gray},
              {"p_blur", p.p_blur},
              {"blur_sigma_lo", p.blur_sigma_lo},
              {"blur_sigma_hi", p.blur_sigma_hi},
              {"cutmix", p.cutmix},
              {"p_cutmix", p.p_cutmix}};
}

inline StrongPolicy strong_policy_from_json(const json& j, const std::string& where) {
  StrongPolicy p;
  detail::StrictObject o(j, where);
  o.get("p_jitter", p.p_jitter);
  o.get("brightness_lo", p.brightness_lo);
  o.get("brightness_hi", p.brightness_hi);
  o.get("contrast_lo", p.contrast_lo);
  o.get("contrast_hi", p.contrast_hi);
  o.get("p_gray", p.p_gray);
  o.get("p_blur", p.p_blur);
  o.get("blur_sigma_lo", p.blur_sigma_lo);
  o.get("blur_sigma_hi", p.blur_sigma_hi);
  o.get("cutmix", p.cutmix);
  o.get("p_cutmix", p.p_cutmix);
  o.finish();
  return p;
}

inline json to_json(const TTAPolicy& p) {
  return json{{"hflip", p.hflip}, {"scales", p.scales}};
}

inline TTAPolicy tta_policy_from_json(const json& j, const std::string& where) {
  TTAPolicy p;
  detail::StrictObject o(j, where);
  o.get("hflip", p.hflip);
  o.get("scales", p.scales);
  o.finish();
  return p;
}

inline json to_json(const RunPaths& p) {
  return json{{"train_shard", p.train_shard},
              {"val_shard", p.val_shard},
              {"test_shard", p.test_shard},
              {"out_dir", p.out_dir}};
}

inline RunPaths paths_from_json(const json& j, const std::string& where) {
  RunPaths p;
  detail::StrictObject o(j, where);
  o.get("train_shard", p.train_shard);
  o.get("val_shard", p.val_shard);
  o.get("test_shard", p.test_shard);
  o.get("out_dir", p.out_dir);
  o.finish();
  return p;
}

// Fully resolved echo: serializing and re-parsing reproduces the config
// exactly, defaults included.
inline json to_json(const TrainConfig& c) {
  return json{{"conf_threshold", c.conf_threshold},
              {"unsup_weight", c.unsup_weight},
              {"ema_decay", c.ema_decay},
              {"lr", c.lr},
              {"head_lr_mult", c.head_lr_mult},
              {"momentum", c.momentum},
              {"batch_clean", c.batch_clean},
              {"batch_degraded", c.batch_degraded},
              {"epochs", c.epochs},
              {"crop", c.crop},
              {"seed", c.seed},
              {"freeze_encoder", c.freeze_encoder},
              {"mode", mode_name(c.mode)},
              {"deterministic", c.deterministic},
              {"burnin_steps", c.burnin_steps},
              {"keep_prob", c.keep_prob},
              {"ld_normalize",
               c.ld_normalize == LdNormalize::AllPixels ? "all_pixels" : "confident_pixels"},
              {"strong", to_json(c.strong)},
              {"tta", to_json(c.tta)},
              {"paths", to_json(c.paths)}};
}

inline TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  detail::StrictObject o(j, "");
  o.get("conf_threshold", c.conf_threshold);
  o.get("unsup_weight", c.unsup_weight);
  o.get("ema_decay", c.ema_decay);
  o.get("lr", c.lr);
  o.get("head_lr_mult", c.head_lr_mult);
  o.get("momentum", c.momentum);
  o.get("batch_clean", c.batch_clean);
  o.get("batch_degraded", c.batch_degraded);
  o.get("epochs", c.epochs);
  o.get("crop", c.crop);
  o.get("seed", c.seed);
  o.get("freeze_encoder", c.freeze_encoder);
  if (o.has("mode")) c.mode = mode_from_name(o.raw("mode").get<std::string>());
  o.get("deterministic", c.deterministic);
  o.get("burnin_steps", c.burnin_steps);
  o.get("keep_prob", c.keep_prob);
  if (o.has("ld_normalize")) {
    const std::string v = o.raw("ld_normalize").get<std::string>();
    if (v == "all_pixels")
      c.ld_normalize = LdNormalize::AllPixels;
    else if (v == "confident_pixels")
      c.ld_normalize = LdNormalize::ConfidentPixels;
    else
      throw ValidationError("config: ld_normalize must be 'all_pixels' or 'confident_pixels'");
  }
  if (o.has("strong")) c.strong = strong_policy_from_json(o.raw("strong"), "strong.");
  if (o.has("tta")) c.tta = tta_policy_from_json(o.raw("tta"), "tta.");
  if (o.has("paths")) c.paths = paths_from_json(o.raw("paths"), "paths.");
  o.finish();
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("config: " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline std::string config_echo(const TrainConfig& c) { return to_json(c).dump(); }

}  // namespace wps

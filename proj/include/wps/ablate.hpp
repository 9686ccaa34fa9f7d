#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "wps/checkpoint.hpp"
#include "wps/evaluate.hpp"
#include "wps/trainer.hpp"

namespace wps {

struct AblationRow {
  std::string name;
  bool ok = false;
  double miou = 0.0;
  double mdice = 0.0;
  std::string error;
};

// Three-row study: supervised training on clean images only, the full
// semi-supervised run, and the same semi checkpoint evaluated with TTA.
// All rows score on the degraded test split.
struct AblationTable {
  std::vector<AblationRow> rows;

  std::string to_csv() const {
    std::ostringstream os;
    os << "setting,miou,mdice,status\n";
    for (const AblationRow& r : rows) {
      os << r.name << ",";
      if (r.ok)
        os << detail::fmt_g(r.miou) << "," << detail::fmt_g(r.mdice) << ",ok\n";
      else
        os << ",,failed: " << r.error << "\n";
    }
    return os.str();
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "setting            miou    mdice\n";
    for (const AblationRow& r : rows) {
      os << r.name;
      for (size_t i = r.name.size(); i < 19; ++i) os << ' ';
      if (r.ok) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.4f  %.4f", r.miou, r.mdice);
        os << buf << "\n";
      } else {
        os << "failed: " << r.error << "\n";
      }
    }
    return os.str();
  }

  const AblationRow* find(const std::string& name) const {
    for (const AblationRow& r : rows)
      if (r.name == name) return &r;
    return nullptr;
  }
};

struct AblateOptions {
  std::string out_dir;          // row checkpoints/logs land here when set
  std::string load_ckpt_clean;  // skip training and evaluate these instead
  std::string load_ckpt_semi;
  std::ostream* log = nullptr;
};

inline AblationTable ablate(const TrainConfig& base, const TrainData& train_data,
                            const TrainData* val_data, const TrainData& test_data,
                            const AblateOptions& opts = {}) {
  AblationTable table;
  const int threads = worker_count();

  auto eval_params = [&](const ParamSet<float>& params, bool tta) {
    EvalOptions eopts;
    eopts.use_degraded = true;
    eopts.tta = tta;
    eopts.tta_policy = base.tta;
    eopts.threads = threads;
    return miou_mdice(evaluate_scenes(params, test_data.scenes(), eopts));
  };

  auto row_params = [&](TrainMode mode, const std::string& load_path,
                        const std::string& row_name) -> ParamSet<float> {
    if (!load_path.empty()) {
      if (opts.log) *opts.log << "[ablate] " << row_name << ": loading " << load_path << "\n";
      return load_checkpoint(load_path).teacher;
    }
    TrainConfig cfg = base;
    cfg.mode = mode;
    std::string ckpt, csv;
    if (!opts.out_dir.empty()) {
      std::filesystem::create_directories(opts.out_dir);
      ckpt = (std::filesystem::path(opts.out_dir) / (row_name + ".ckpt")).string();
      csv = (std::filesystem::path(opts.out_dir) / (row_name + ".csv")).string();
    }
    if (opts.log) *opts.log << "[ablate] " << row_name << ": training\n";
    return train(cfg, train_data, val_data, ckpt, csv, nullptr, opts.log).teacher;
  };

  ParamSet<float> semi_params;
  bool semi_ok = false;

  {
    AblationRow row;
    row.name = "clean_only";
    try {
      const Metrics m = eval_params(
          row_params(TrainMode::CleanOnly, opts.load_ckpt_clean, row.name), /*tta=*/false);
      row.ok = true;
      row.miou = m.miou;
      row.mdice = m.mdice;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    table.rows.push_back(row);
  }
  {
    AblationRow row;
    row.name = "semi";
    try {
      semi_params = row_params(TrainMode::Semi, opts.load_ckpt_semi, row.name);
      semi_ok = true;
      const Metrics m = eval_params(semi_params, /*tta=*/false);
      row.ok = true;
      row.miou = m.miou;
      row.mdice = m.mdice;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    table.rows.push_back(row);
  }
  {
    AblationRow row;
    row.name = "semi_tta";
    if (!semi_ok) {
      row.error = "semi row unavailable";
    } else {
      try {
        const Metrics m = eval_params(semi_params, /*tta=*/true);
        row.ok = true;
        row.miou = m.miou;
        row.mdice = m.mdice;
      } catch (const std::exception& e) {
        row.error = e.what();
      }
    }
    table.rows.push_back(row);
  }
  return table;
}

}  // namespace wps

// wps: weak-to-strong pseudo-label segmentation at desk scale.
// Subcommands: gen-data, train, eval, ablate, selfcheck.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "wps/ablate.hpp"
#include "wps/checkpoint.hpp"
#include "wps/config.hpp"
#include "wps/datagen.hpp"
#include "wps/evaluate.hpp"
#include "wps/selfcheck.hpp"
#include "wps/shard.hpp"
#include "wps/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

std::vector<wps::Scene> generate_split(uint64_t base_seed, uint64_t split_tag, int count,
                                       int size, int classes) {
  std::vector<wps::Scene> scenes(static_cast<size_t>(count));
  wps::parallel_for(count, wps::worker_count(), [&](int64_t i) {
    scenes[static_cast<size_t>(i)] = wps::generate_scene(
        wps::derive_seed(base_seed, {split_tag, static_cast<uint64_t>(i)}), size, size, classes);
  });
  return scenes;
}

int cmd_gen_data(const std::string& out_dir, int n_train, int n_val, int n_test, int size,
                 int classes, uint64_t seed) {
  wps::check(n_train >= 1 && n_val >= 0 && n_test >= 0, "gen-data: counts must be positive");
  std::filesystem::create_directories(out_dir);
  struct Split {
    const char* name;
    uint64_t tag;
    int count;
  };
  const Split splits[] = {{"train", wps::kStreamSplitTrain, n_train},
                          {"val", wps::kStreamSplitVal, n_val},
                          {"test", wps::kStreamSplitTest, n_test}};
  for (const Split& s : splits) {
    if (s.count == 0) continue;
    const auto scenes = generate_split(seed, s.tag, s.count, size, classes);
    const std::string path =
        (std::filesystem::path(out_dir) / (std::string(s.name) + ".shard")).string();
    wps::write_shard(scenes, path);
    std::cout << "wrote " << path << " (" << s.count << " scenes, " << size << "x" << size
              << ", " << classes << " classes)\n";
  }
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& mode_override,
              const std::string& resume_path) {
  wps::TrainConfig cfg = wps::load_config(config_path);
  if (!mode_override.empty()) cfg.mode = wps::mode_from_name(mode_override);
  wps::check(!cfg.paths.train_shard.empty(), "train: paths.train_shard missing from config");
  std::cout << "# config: " << wps::config_echo(cfg) << "\n";

  wps::TrainData train_data(wps::read_shard(cfg.paths.train_shard));
  std::optional<wps::TrainData> val_data;
  if (!cfg.paths.val_shard.empty()) val_data.emplace(wps::read_shard(cfg.paths.val_shard));

  std::optional<wps::Checkpoint> resume;
  if (!resume_path.empty()) resume = wps::load_checkpoint(resume_path);

  std::filesystem::create_directories(cfg.paths.out_dir);
  const std::string ckpt =
      (std::filesystem::path(cfg.paths.out_dir) / "checkpoint.ckpt").string();
  const std::string csv = (std::filesystem::path(cfg.paths.out_dir) / "metrics.csv").string();

  const wps::TrainOutput out =
      wps::train(cfg, train_data, val_data ? &*val_data : nullptr, ckpt, csv,
                 resume ? &*resume : nullptr, &std::cout);
  std::cout << "trained " << out.steps << " steps; checkpoint " << ckpt << "; metrics " << csv
            << "\n";
  if (out.last_val_miou >= 0.0) std::cout << "final val_miou " << out.last_val_miou << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path, const std::string& tta,
             bool use_student, const std::string& csv_path, const std::string& dump_dir) {
  wps::check(tta == "on" || tta == "off", "eval: --tta must be 'on' or 'off'");
  const wps::Checkpoint ck = wps::load_checkpoint(ckpt_path);
  wps::TrainConfig cfg;
  try {
    cfg = wps::config_from_json(wps::json::parse(ck.config_json));
  } catch (const std::exception& e) {
    throw wps::IoError("eval: checkpoint carries an unreadable config: " + std::string(e.what()));
  }
  const wps::ParamSet<float>& params = use_student ? ck.student : ck.teacher;
  const std::vector<wps::Scene> scenes = wps::read_shard(data_path);

  const bool with_tta = tta == "on";
  std::vector<wps::LabelMask> preds(scenes.size());
  wps::parallel_for(static_cast<int64_t>(scenes.size()), wps::worker_count(), [&](int64_t i) {
    const wps::Scene& s = scenes[static_cast<size_t>(i)];
    const wps::Tensor<float> probs = with_tta ? wps::tta_predict(params, s.degraded, cfg.tta)
                                              : wps::predict(params, s.degraded);
    preds[static_cast<size_t>(i)] = wps::argmax_labels(probs);
  });
  wps::ConfusionMatrix cm(static_cast<int>(scenes.front().num_classes));
  for (size_t i = 0; i < scenes.size(); ++i)
    wps::accumulate_confusion(cm, scenes[i].label, preds[i]);
  const wps::Metrics m = wps::miou_mdice(cm);

  wps::json per_class = wps::json::array();
  for (size_t k = 0; k < m.per_class.size(); ++k)
    per_class.push_back({{"class", k},
                         {"iou", m.per_class[k].iou},
                         {"dice", m.per_class[k].dice},
                         {"included", m.per_class[k].included}});
  const wps::json report = {{"miou", m.miou}, {"mdice", m.mdice}, {"per_class", per_class}};
  std::cout << report.dump(2) << "\n";

  if (!csv_path.empty()) {
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw wps::IoError("eval: cannot open " + csv_path);
    out << "metric,class,value\n";
    out << "miou,," << m.miou << "\n";
    out << "mdice,," << m.mdice << "\n";
    for (size_t k = 0; k < m.per_class.size(); ++k) {
      if (!m.per_class[k].included) continue;
      out << "iou," << k << "," << m.per_class[k].iou << "\n";
      out << "dice," << k << "," << m.per_class[k].dice << "\n";
    }
  }
  if (!dump_dir.empty()) {
    std::filesystem::create_directories(dump_dir);
    char name[32];
    for (size_t i = 0; i < preds.size(); ++i) {
      std::snprintf(name, sizeof(name), "mask_%04zu.pgm", i);
      wps::write_pgm(preds[i], (std::filesystem::path(dump_dir) / name).string());
    }
    std::cout << "dumped " << preds.size() << " raw masks to " << dump_dir << "\n";
  }
  return kExitOk;
}

int cmd_ablate(const std::string& config_path, const std::string& load_clean,
               const std::string& load_semi) {
  const wps::TrainConfig cfg = wps::load_config(config_path);
  wps::check(!cfg.paths.train_shard.empty() && !cfg.paths.test_shard.empty(),
             "ablate: config needs paths.train_shard and paths.test_shard");
  std::cout << "# config: " << wps::config_echo(cfg) << "\n";

  wps::TrainData train_data(wps::read_shard(cfg.paths.train_shard));
  std::optional<wps::TrainData> val_data;
  if (!cfg.paths.val_shard.empty()) val_data.emplace(wps::read_shard(cfg.paths.val_shard));
  wps::TrainData test_data(wps::read_shard(cfg.paths.test_shard));

  wps::AblateOptions opts;
  opts.out_dir = cfg.paths.out_dir;
  opts.load_ckpt_clean = load_clean;
  opts.load_ckpt_semi = load_semi;
  opts.log = &std::cout;
  const wps::AblationTable table =
      wps::ablate(cfg, train_data, val_data ? &*val_data : nullptr, test_data, opts);

  std::cout << table.to_text();
  std::filesystem::create_directories(cfg.paths.out_dir);
  const std::string csv_path =
      (std::filesystem::path(cfg.paths.out_dir) / "ablation.csv").string();
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw wps::IoError("ablate: cannot open " + csv_path);
  csv << table.to_csv();
  std::cout << "wrote " << csv_path << "\n";

  for (const wps::AblationRow& r : table.rows)
    if (!r.ok) {
      std::cerr << "ablate: row '" << r.name << "' failed: " << r.error << "\n";
      return kExitIo;
    }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"weak-to-strong semi-supervised segmentation pipeline"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate paired clean/degraded shards");
  std::string gen_out = "data";
  int gen_train = 512, gen_val = 128, gen_test = 128, gen_size = 64, gen_classes = 6;
  uint64_t gen_seed = 42;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--train", gen_train, "training scenes");
  gen->add_option("--val", gen_val, "validation scenes");
  gen->add_option("--test", gen_test, "test scenes");
  gen->add_option("--size", gen_size, "image height/width");
  gen->add_option("--classes", gen_classes, "number of classes");
  gen->add_option("--seed", gen_seed, "base seed");

  auto* tr = app.add_subcommand("train", "train on shards per a JSON config");
  std::string tr_config, tr_mode, tr_resume;
  tr->add_option("--config", tr_config, "JSON config path")->required();
  tr->add_option("--mode", tr_mode, "override mode: clean_only|semi");
  tr->add_option("--resume", tr_resume, "resume from checkpoint");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a shard");
  std::string ev_ckpt, ev_data, ev_tta = "off", ev_csv, ev_dump;
  bool ev_student = false;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--data", ev_data, "shard path")->required();
  ev->add_option("--tta", ev_tta, "test-time augmentation: on|off");
  ev->add_flag("--use-student", ev_student, "evaluate the student instead of the EMA teacher");
  ev->add_option("--csv", ev_csv, "write metrics CSV here");
  ev->add_option("--dump-masks", ev_dump, "dump predicted masks as PGM files here");

  auto* ab = app.add_subcommand("ablate", "run the three-row ablation");
  std::string ab_config, ab_clean, ab_semi;
  ab->add_option("--config", ab_config, "JSON config path")->required();
  ab->add_option("--load-clean", ab_clean, "reuse a clean_only checkpoint");
  ab->add_option("--load-semi", ab_semi, "reuse a semi checkpoint");

  auto* sc = app.add_subcommand("selfcheck", "run the fast invariant suite");
  bool sc_fault = false;
  sc->add_flag("--inject-gradient-fault", sc_fault)->group("");  // test hook, hidden

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_train, gen_val, gen_test, gen_size, gen_classes, gen_seed);
    if (tr->parsed()) return cmd_train(tr_config, tr_mode, tr_resume);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_tta, ev_student, ev_csv, ev_dump);
    if (ab->parsed()) return cmd_ablate(ab_config, ab_clean, ab_semi);
    if (sc->parsed()) {
      wps::SelfCheckOptions opts;
      opts.inject_gradient_fault = sc_fault;
      return wps::run_selfcheck(std::cout, opts) ? kExitOk : 1;
    }
  } catch (const wps::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const wps::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const wps::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}

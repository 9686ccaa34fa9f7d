#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <vector>

#include "wps/checkpoint.hpp"
#include "wps/config.hpp"
#include "wps/datagen.hpp"
#include "wps/shard.hpp"

using namespace wps;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("wps_fmt_" + std::to_string(::getpid()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const char* name) const { return (path / name).string(); }
};

std::vector<char> slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<char>((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
}

void spit(const std::string& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("shard round trip is bit-exact") {
  TempDir tmp;
  std::vector<Scene> scenes;
  for (uint64_t s = 0; s < 8; ++s) scenes.push_back(generate_scene(s + 100, 32, 32, 5));
  const std::string path = tmp.file("a.shard");
  write_shard(scenes, path);

  const std::vector<Scene> back = read_shard(path);
  REQUIRE(back.size() == scenes.size());
  for (size_t i = 0; i < scenes.size(); ++i) {
    REQUIRE(back[i].clean == scenes[i].clean);
    REQUIRE(back[i].degraded == scenes[i].degraded);
    REQUIRE(back[i].label == scenes[i].label);
    REQUIRE(back[i].weather == scenes[i].weather);
    REQUIRE(back[i].severity == scenes[i].severity);
    REQUIRE(back[i].seed == scenes[i].seed);
    REQUIRE(back[i].num_classes == scenes[i].num_classes);
  }

  // writing the reread scenes reproduces identical bytes
  const std::string path2 = tmp.file("b.shard");
  write_shard(back, path2);
  REQUIRE(slurp(path) == slurp(path2));
}

TEST_CASE("shard reader diagnoses corruption") {
  TempDir tmp;
  std::vector<Scene> scenes{generate_scene(1, 16, 16, 3), generate_scene(2, 16, 16, 3)};
  const std::string path = tmp.file("c.shard");
  write_shard(scenes, path);
  const std::vector<char> good = slurp(path);

  SECTION("wrong magic") {
    std::vector<char> bad = good;
    bad[0] = 'X';
    spit(path, bad);
    REQUIRE_THROWS_WITH(read_shard(path), Catch::Matchers::ContainsSubstring("magic"));
  }
  SECTION("wrong version") {
    std::vector<char> bad = good;
    bad[8] = 42;
    spit(path, bad);
    REQUIRE_THROWS_WITH(read_shard(path), Catch::Matchers::ContainsSubstring("version"));
  }
  SECTION("truncated mid-record names expected and actual byte counts") {
    std::vector<char> bad(good.begin(), good.end() - 1000);
    spit(path, bad);
    try {
      read_shard(path);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      const std::string msg = e.what();
      REQUIRE(msg.find(std::to_string(good.size())) != std::string::npos);
      REQUIRE(msg.find(std::to_string(good.size() - 1000)) != std::string::npos);
    }
  }
  SECTION("empty scene list is rejected") {
    REQUIRE_THROWS_AS(write_shard({}, tmp.file("d.shard")), ValidationError);
  }
  SECTION("mixed shapes are rejected") {
    std::vector<Scene> mixed{generate_scene(1, 16, 16, 3), generate_scene(2, 32, 32, 3)};
    REQUIRE_THROWS_AS(write_shard(mixed, tmp.file("e.shard")), ValidationError);
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  TempDir tmp;
  const ParamSet<float> student = ParamSet<float>::init(6, 11);
  const ParamSet<float> teacher = ParamSet<float>::init(6, 12);
  const ParamSet<float> momentum = ParamSet<float>::init(6, 13);
  const std::string path = tmp.file("a.ckpt");
  const std::string cfg = config_echo(TrainConfig{});
  save_checkpoint(path, 1234, 7, cfg, student, teacher, momentum);

  const Checkpoint ck = load_checkpoint(path);
  REQUIRE(ck.step == 1234);
  REQUIRE(ck.epoch == 7);
  REQUIRE(ck.config_json == cfg);
  REQUIRE(ck.student.num_classes == 6);
  bool same = true;
  int i = 0;
  const Tensor<float>* orig[10];
  student.for_each([&](std::string_view, const Tensor<float>& t) { orig[i++] = &t; });
  i = 0;
  ck.student.for_each(
      [&](std::string_view, const Tensor<float>& t) { same = same && t == *orig[i++]; });
  REQUIRE(same);

  const std::string path2 = tmp.file("b.ckpt");
  save_checkpoint(path2, ck.step, ck.epoch, ck.config_json, ck.student, ck.teacher, ck.momentum);
  REQUIRE(slurp(path) == slurp(path2));
}

TEST_CASE("checkpoint reader diagnoses corruption") {
  TempDir tmp;
  const ParamSet<float> p = ParamSet<float>::init(4, 21);
  const std::string path = tmp.file("c.ckpt");
  save_checkpoint(path, 1, 1, "{}", p, p, p);
  const std::vector<char> good = slurp(path);

  SECTION("magic mismatch") {
    std::vector<char> bad = good;
    bad[3] = 'x';
    spit(path, bad);
    REQUIRE_THROWS_WITH(load_checkpoint(path), Catch::Matchers::ContainsSubstring("magic"));
  }
  SECTION("truncation") {
    std::vector<char> bad(good.begin(), good.end() - 64);
    spit(path, bad);
    REQUIRE_THROWS_WITH(load_checkpoint(path), Catch::Matchers::ContainsSubstring("truncated"));
  }
  SECTION("missing file") {
    REQUIRE_THROWS_AS(load_checkpoint(tmp.file("nope.ckpt")), IoError);
  }
}

TEST_CASE("config parse, validate, echo round trip is lossless") {
  TrainConfig cfg;
  cfg.conf_threshold = 0.9;
  cfg.unsup_weight = 0.5;
  cfg.epochs = 3;
  cfg.mode = TrainMode::CleanOnly;
  cfg.strong.cutmix = true;
  cfg.tta.scales = {0.5, 1.0};
  cfg.paths.train_shard = "x/train.shard";
  const std::string echoed = config_echo(cfg);
  const TrainConfig back = config_from_json(json::parse(echoed));
  REQUIRE(config_echo(back) == echoed);
  REQUIRE(back.mode == TrainMode::CleanOnly);
  REQUIRE(back.strong.cutmix);
  REQUIRE(back.tta.scales == std::vector<double>{0.5, 1.0});
  REQUIRE(back.paths.train_shard == "x/train.shard");
}

TEST_CASE("config rejects unknown keys and bad values") {
  json j = to_json(TrainConfig{});
  SECTION("top-level unknown key") {
    j["learning_rate"] = 0.1;  // not a real key
    REQUIRE_THROWS_WITH(config_from_json(j), Catch::Matchers::ContainsSubstring("learning_rate"));
  }
  SECTION("nested unknown key") {
    j["strong"]["p_rotate"] = 0.5;
    REQUIRE_THROWS_WITH(config_from_json(j), Catch::Matchers::ContainsSubstring("p_rotate"));
  }
  SECTION("invalid mode") {
    j["mode"] = "both";
    REQUIRE_THROWS_AS(config_from_json(j), ValidationError);
  }
  SECTION("out-of-range threshold") {
    j["conf_threshold"] = 1.5;
    REQUIRE_THROWS_AS(config_from_json(j), ValidationError);
  }
  SECTION("odd crop") {
    j["crop"] = 33;
    REQUIRE_THROWS_AS(config_from_json(j), ValidationError);
  }
}

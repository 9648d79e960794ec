#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "stsep/config.hpp"

using namespace stsep;

TEST_CASE("sha1 known vectors") {
  CHECK(sha1_hex("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
  CHECK(sha1_hex("") == "da39a3ee5e6b4b0d3255bfef95601890afd80709");
}

TEST_CASE("config parse/serialize round-trip preserves the hash") {
  ExperimentConfig cfg = default_experiment_config();
  cfg.model.policy = make_policy(PolicyMode::ns, 3);
  cfg.model.policy.set_stsep({1, 2, 5});
  cfg.train.epochs = 7;
  cfg.data.task.kind = TaskKind::playback2;
  cfg.model.num_classes = 2;

  nlohmann::json j = experiment_to_json(cfg);
  ExperimentConfig back = parse_experiment_config(j);
  CHECK(config_hash(back) == config_hash(cfg));
  CHECK(back.train.epochs == 7);
  CHECK(back.model.policy.stage_stateful(4));
  CHECK(!back.model.policy.stage_stateful(3));
  CHECK(back.model.policy.stage_stsep(5));
  CHECK(!back.model.policy.stage_stsep(3));
}

TEST_CASE("unknown keys are rejected by name") {
  nlohmann::json j{{"model", {{"tau", 2.0}, {"typo_key", 1}}}};
  CHECK_THROWS_WITH_AS(parse_experiment_config(j), doctest::Contains("model.typo_key"),
                       ConfigError);
  nlohmann::json top{{"outputs", "x"}};
  CHECK_THROWS_AS(parse_experiment_config(top), ConfigError);
}

TEST_CASE("dotted-path overrides parse JSON values with string fallback") {
  nlohmann::json j = nlohmann::json::object();
  apply_override(j, "model.tau=2.5");
  apply_override(j, "model.policy.mode=ns");
  apply_override(j, "model.policy.k=4");
  apply_override(j, "data.task.kind=playback2");
  ExperimentConfig cfg = parse_experiment_config(j);
  CHECK(cfg.model.neuron.tau == 2.5);
  CHECK(!cfg.model.policy.stage_stateful(4));
  CHECK(cfg.model.policy.stage_stateful(5));
  CHECK(cfg.data.task.kind == TaskKind::playback2);
  CHECK_THROWS_AS(apply_override(j, "no_equals_sign"), ConfigError);
}

TEST_CASE("config hash changes when a field changes") {
  ExperimentConfig a = default_experiment_config();
  ExperimentConfig b = a;
  b.train.lr = 1e-3;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("bad values surface as configuration errors naming the constraint") {
  nlohmann::json j{{"model", {{"tau", 0.25}}}};
  CHECK_THROWS_AS(parse_experiment_config(j), ConfigError);
  nlohmann::json j2{{"model", {{"policy", {{"mode", "sideways"}}}}}};
  CHECK_THROWS_AS(parse_experiment_config(j2), ConfigError);
  nlohmann::json j3{{"data", {{"sampler", {{"kind", "fancy"}}}}}};
  CHECK_THROWS_AS(parse_experiment_config(j3), ConfigError);
}

TEST_CASE("manifest accumulates epochs and artifacts") {
  ExperimentConfig cfg = default_experiment_config();
  const std::string path =
      (std::filesystem::temp_directory_path() / "manifest_test.json").string();
  RunManifest manifest(path, cfg);
  MetricsRecord rec;
  rec.epoch = 0;
  rec.top1 = 0.5;
  manifest.add_epoch(rec);
  rec.epoch = 1;
  manifest.add_epoch(rec);
  manifest.add_artifact("final.stck");
  manifest.write();

  std::ifstream is(path);
  nlohmann::json j;
  is >> j;
  CHECK(j["epochs"].size() == 2);
  CHECK(j["artifacts"].size() == 1);
  CHECK(j["config_hash"] == config_hash(cfg));
  CHECK(j["config"]["train"]["lr"] == cfg.train.lr);
}

TEST_CASE("sampler spec comes from model T") {
  ExperimentConfig cfg = default_experiment_config();
  cfg.model.T = 6;
  SamplerSpec s = make_sampler(cfg, Phase::eval);
  CHECK(s.T == 6);
  CHECK(s.mode == Phase::eval);
}

TEST_CASE("synthetic loaders honor counts and containers") {
  ExperimentConfig cfg = default_experiment_config();
  cfg.data.train_count = 12;
  cfg.data.eval_count = 8;
  CHECK(load_train_videos(cfg).size() == 12);
  CHECK(load_eval_videos(cfg).size() == 8);

  const std::string path = (std::filesystem::temp_directory_path() / "cfgdata.stv").string();
  write_container(path, generate(cfg.data.task, 5));
  cfg.data.eval_container = path;
  CHECK(load_eval_videos(cfg).size() == 5);
}

#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "stsep/data.hpp"
#include "stsep/eval.hpp"
#include "stsep/model.hpp"
#include "stsep/train.hpp"

namespace stsep {

extern const char* kVersion;

std::string sha1_hex(const std::string& bytes);

struct DataConfig {
  SyntheticTask task;
  int64_t train_count = 2000;
  int64_t eval_count = 500;
  std::string train_container;  // when set, overrides the synthetic task
  std::string eval_container;
  SamplerKind sampler_kind = SamplerKind::tsn;
  int64_t sampler_stride = 2;
  double hflip_prob = 0.0;
};

struct EvalConfig {
  int64_t clips = 3;
  std::vector<int> recall_ks{1, 3, 5, 10, 20, 50};
};

struct ExperimentConfig {
  uint64_t seed = 1;
  std::string output_dir = "runs/exp";
  BackboneConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
};

ExperimentConfig default_experiment_config();

// strict parse: unknown keys are configuration errors naming the key
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
nlohmann::json experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_experiment_config(const std::string& path,
                                        const std::vector<std::string>& overrides);

// dotted-path override, e.g. "model.tau=2" or "data.task.kind=playback2"
void apply_override(nlohmann::json& j, const std::string& assignment);

std::string config_hash(const ExperimentConfig& cfg);

SamplerSpec make_sampler(const ExperimentConfig& cfg, Phase mode);
std::vector<VideoRecord> load_train_videos(const ExperimentConfig& cfg);
std::vector<VideoRecord> load_eval_videos(const ExperimentConfig& cfg);

// run manifest: config + hashes + per-epoch metrics + artifact list
class RunManifest {
 public:
  RunManifest(const std::string& path, const ExperimentConfig& cfg);
  void add_epoch(const MetricsRecord& rec);
  void add_artifact(const std::string& name);
  void write() const;
  const std::string& hash() const { return config_hash_; }

 private:
  std::string path_;
  std::string config_hash_;
  nlohmann::json doc_;
};

}  // namespace stsep

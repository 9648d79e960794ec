#include "stsep/config.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <set>

namespace stsep {

const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// SHA-1 (FIPS 180-1), enough for content hashing of configs
// ---------------------------------------------------------------------------
std::string sha1_hex(const std::string& bytes) {
  uint32_t h[5] = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u, 0xC3D2E1F0u};
  const uint64_t ml = static_cast<uint64_t>(bytes.size()) * 8;
  std::string msg = bytes;
  msg.push_back(static_cast<char>(0x80));
  while (msg.size() % 64 != 56) msg.push_back('\0');
  for (int i = 7; i >= 0; --i) msg.push_back(static_cast<char>((ml >> (8 * i)) & 0xff));

  auto rol = [](uint32_t v, int s) { return (v << s) | (v >> (32 - s)); };
  for (size_t chunk = 0; chunk < msg.size(); chunk += 64) {
    uint32_t w[80];
    for (int i = 0; i < 16; ++i) {
      w[i] = 0;
      for (int b = 0; b < 4; ++b)
        w[i] = (w[i] << 8) | static_cast<uint8_t>(msg[chunk + static_cast<size_t>(i * 4 + b)]);
    }
    for (int i = 16; i < 80; ++i) w[i] = rol(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
    uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4];
    for (int i = 0; i < 80; ++i) {
      uint32_t f, k;
      if (i < 20) {
        f = (b & c) | (~b & d);
        k = 0x5A827999u;
      } else if (i < 40) {
        f = b ^ c ^ d;
        k = 0x6ED9EBA1u;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8F1BBCDCu;
      } else {
        f = b ^ c ^ d;
        k = 0xCA62C1D6u;
      }
      const uint32_t tmp = rol(a, 5) + f + e + k + w[i];
      e = d;
      d = c;
      c = rol(b, 30);
      b = a;
      a = tmp;
    }
    h[0] += a;
    h[1] += b;
    h[2] += c;
    h[3] += d;
    h[4] += e;
  }
  char out[41];
  std::snprintf(out, sizeof(out), "%08x%08x%08x%08x%08x", h[0], h[1], h[2], h[3], h[4]);
  return out;
}

// ---------------------------------------------------------------------------
// config <-> json
// ---------------------------------------------------------------------------
namespace {

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("config: unknown key '" + where + (where.empty() ? "" : ".") + it.key() +
                        "'");
}

template <class T>
void get_to(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

PolicyMode parse_mode(const std::string& s) {
  if (s == "vanilla") return PolicyMode::vanilla;
  if (s == "ns") return PolicyMode::ns;
  if (s == "rns") return PolicyMode::rns;
  throw ConfigError("config: unknown policy mode '" + s + "'");
}

TaskKind parse_task(const std::string& s) {
  if (s == "direction4") return TaskKind::direction4;
  if (s == "playback2") return TaskKind::playback2;
  if (s == "shape_static") return TaskKind::shape_static;
  throw ConfigError("config: unknown task kind '" + s + "'");
}

const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::direction4: return "direction4";
    case TaskKind::playback2: return "playback2";
    default: return "shape_static";
  }
}

}  // namespace

ExperimentConfig default_experiment_config() {
  ExperimentConfig cfg;
  cfg.model.num_classes = 4;
  cfg.model.T = 8;
  cfg.model.resolution = 32;
  cfg.model.width_multiplier = 0.25;
  cfg.data.task.kind = TaskKind::direction4;
  cfg.data.task.T = 8;
  cfg.data.task.resolution = 32;
  return cfg;
}

ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  check_keys(j, {"seed", "output_dir", "model", "train", "data", "eval"}, "");
  ExperimentConfig cfg = default_experiment_config();
  get_to(j, "seed", cfg.seed);
  get_to(j, "output_dir", cfg.output_dir);

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m,
               {"num_classes", "T", "resolution", "width_multiplier", "tau", "v_threshold",
                "surrogate_width", "policy", "r", "s", "alpha", "temporal_input", "temporal_conv",
                "spatial_branch"},
               "model");
    get_to(m, "num_classes", cfg.model.num_classes);
    get_to(m, "T", cfg.model.T);
    get_to(m, "resolution", cfg.model.resolution);
    get_to(m, "width_multiplier", cfg.model.width_multiplier);
    get_to(m, "tau", cfg.model.neuron.tau);
    get_to(m, "v_threshold", cfg.model.neuron.v_threshold);
    get_to(m, "surrogate_width", cfg.model.neuron.surrogate_width);
    get_to(m, "r", cfg.model.r);
    get_to(m, "s", cfg.model.s);
    get_to(m, "alpha", cfg.model.alpha);
    if (m.contains("temporal_input")) {
      const std::string ti = m.at("temporal_input");
      if (ti == "diff") cfg.model.temporal_input = TemporalInput::diff;
      else if (ti == "current") cfg.model.temporal_input = TemporalInput::current;
      else throw ConfigError("config: unknown temporal_input '" + ti + "'");
    }
    get_to(m, "temporal_conv", cfg.model.temporal_conv);
    get_to(m, "spatial_branch", cfg.model.spatial_branch);
    if (m.contains("policy")) {
      const auto& p = m.at("policy");
      check_keys(p, {"mode", "k", "stsep_stages"}, "model.policy");
      std::string mode = "vanilla";
      int k = 0;
      get_to(p, "mode", mode);
      get_to(p, "k", k);
      cfg.model.policy = make_policy(parse_mode(mode), k);
      if (p.contains("stsep_stages"))
        cfg.model.policy.set_stsep(p.at("stsep_stages").get<std::vector<int>>());
    }
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t,
               {"lr", "weight_decay", "beta1", "beta2", "eps", "epochs", "batch_size",
                "reference_batch", "eta_min"},
               "train");
    get_to(t, "lr", cfg.train.lr);
    get_to(t, "weight_decay", cfg.train.weight_decay);
    get_to(t, "beta1", cfg.train.beta1);
    get_to(t, "beta2", cfg.train.beta2);
    get_to(t, "eps", cfg.train.eps);
    get_to(t, "epochs", cfg.train.epochs);
    get_to(t, "batch_size", cfg.train.batch_size);
    get_to(t, "reference_batch", cfg.train.reference_batch);
    get_to(t, "eta_min", cfg.train.eta_min);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d,
               {"task", "train_count", "eval_count", "train_container", "eval_container",
                "sampler", "hflip_prob"},
               "data");
    get_to(d, "train_count", cfg.data.train_count);
    get_to(d, "eval_count", cfg.data.eval_count);
    get_to(d, "train_container", cfg.data.train_container);
    get_to(d, "eval_container", cfg.data.eval_container);
    get_to(d, "hflip_prob", cfg.data.hflip_prob);
    if (d.contains("task")) {
      const auto& tk = d.at("task");
      check_keys(tk, {"kind", "resolution", "T", "noise_sigma", "seed"}, "data.task");
      if (tk.contains("kind")) cfg.data.task.kind = parse_task(tk.at("kind"));
      get_to(tk, "resolution", cfg.data.task.resolution);
      get_to(tk, "T", cfg.data.task.T);
      get_to(tk, "noise_sigma", cfg.data.task.noise_sigma);
      get_to(tk, "seed", cfg.data.task.seed);
    }
    if (d.contains("sampler")) {
      const auto& s = d.at("sampler");
      check_keys(s, {"kind", "stride"}, "data.sampler");
      if (s.contains("kind")) {
        const std::string k = s.at("kind");
        if (k == "tsn") cfg.data.sampler_kind = SamplerKind::tsn;
        else if (k == "dense") cfg.data.sampler_kind = SamplerKind::dense;
        else throw ConfigError("config: unknown sampler kind '" + k + "'");
      }
      get_to(s, "stride", cfg.data.sampler_stride);
    }
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e, {"clips", "recall_ks"}, "eval");
    get_to(e, "clips", cfg.eval.clips);
    get_to(e, "recall_ks", cfg.eval.recall_ks);
  }
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

nlohmann::json experiment_to_json(const ExperimentConfig& cfg) {
  std::vector<int> stsep_stages;
  for (int st = 1; st <= 5; ++st)
    if (cfg.model.policy.stage_stsep(st)) stsep_stages.push_back(st);
  // policy serialized as explicit stateful flags via mode/k reconstruction
  int ns_k = 0;
  for (int st = 1; st <= 5; ++st)
    if (!cfg.model.policy.stage_stateful(st)) ns_k = st;
  bool is_ns = true, is_rns = true;
  for (int st = 1; st <= 5; ++st) {
    const bool off = !cfg.model.policy.stage_stateful(st);
    if (off != (st <= ns_k)) is_ns = false;
  }
  int rns_k = 0;
  for (int st = 5; st >= 1; --st)
    if (!cfg.model.policy.stage_stateful(st)) rns_k = 6 - st;
  for (int st = 1; st <= 5; ++st) {
    const bool off = !cfg.model.policy.stage_stateful(st);
    if (off != (st >= 6 - rns_k)) is_rns = false;
  }
  nlohmann::json policy;
  if (is_ns) policy = {{"mode", ns_k == 0 ? "vanilla" : "ns"}, {"k", ns_k}};
  else if (is_rns) policy = {{"mode", "rns"}, {"k", rns_k}};
  else throw ConfigError("experiment_to_json: policy is not ns/rns representable");
  policy["stsep_stages"] = stsep_stages;

  return nlohmann::json{
      {"seed", cfg.seed},
      {"output_dir", cfg.output_dir},
      {"model",
       {{"num_classes", cfg.model.num_classes},
        {"T", cfg.model.T},
        {"resolution", cfg.model.resolution},
        {"width_multiplier", cfg.model.width_multiplier},
        {"tau", cfg.model.neuron.tau},
        {"v_threshold", cfg.model.neuron.v_threshold},
        {"surrogate_width", cfg.model.neuron.surrogate_width},
        {"policy", policy},
        {"r", cfg.model.r},
        {"s", cfg.model.s},
        {"alpha", cfg.model.alpha},
        {"temporal_input", cfg.model.temporal_input == TemporalInput::diff ? "diff" : "current"},
        {"temporal_conv", cfg.model.temporal_conv},
        {"spatial_branch", cfg.model.spatial_branch}}},
      {"train",
       {{"lr", cfg.train.lr},
        {"weight_decay", cfg.train.weight_decay},
        {"beta1", cfg.train.beta1},
        {"beta2", cfg.train.beta2},
        {"eps", cfg.train.eps},
        {"epochs", cfg.train.epochs},
        {"batch_size", cfg.train.batch_size},
        {"reference_batch", cfg.train.reference_batch},
        {"eta_min", cfg.train.eta_min}}},
      {"data",
       {{"task",
         {{"kind", task_name(cfg.data.task.kind)},
          {"resolution", cfg.data.task.resolution},
          {"T", cfg.data.task.T},
          {"noise_sigma", cfg.data.task.noise_sigma},
          {"seed", cfg.data.task.seed}}},
        {"train_count", cfg.data.train_count},
        {"eval_count", cfg.data.eval_count},
        {"train_container", cfg.data.train_container},
        {"eval_container", cfg.data.eval_container},
        {"sampler",
         {{"kind", cfg.data.sampler_kind == SamplerKind::tsn ? "tsn" : "dense"},
          {"stride", cfg.data.sampler_stride}}},
        {"hflip_prob", cfg.data.hflip_prob}}},
      {"eval", {{"clips", cfg.eval.clips}, {"recall_ks", cfg.eval.recall_ks}}}};
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override '" + assignment + "' must look like path.key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  nlohmann::json* cur = &j;
  size_t start = 0;
  while (true) {
    const size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty path segment");
    if (dot == std::string::npos) {
      nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
      (*cur)[key] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
      return;
    }
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

ExperimentConfig load_experiment_config(const std::string& path,
                                        const std::vector<std::string>& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path);
    j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config " + path + " is not valid JSON");
  }
  for (const auto& o : overrides) apply_override(j, o);
  return parse_experiment_config(j);
}

std::string config_hash(const ExperimentConfig& cfg) {
  return sha1_hex(experiment_to_json(cfg).dump());
}

SamplerSpec make_sampler(const ExperimentConfig& cfg, Phase mode) {
  SamplerSpec s;
  s.kind = cfg.data.sampler_kind;
  s.T = cfg.model.T;
  s.stride = cfg.data.sampler_stride;
  s.mode = mode;
  return s;
}

namespace {
std::vector<VideoRecord> load_videos(const ExperimentConfig& cfg, const std::string& container,
                                     int64_t count, uint64_t seed_shift) {
  if (!container.empty()) return read_container(container);
  SyntheticTask task = cfg.data.task;
  task.seed = mix_seed(task.seed, seed_shift);
  return generate(task, count);
}
}  // namespace

std::vector<VideoRecord> load_train_videos(const ExperimentConfig& cfg) {
  return load_videos(cfg, cfg.data.train_container, cfg.data.train_count, 0x7472ull);
}
std::vector<VideoRecord> load_eval_videos(const ExperimentConfig& cfg) {
  return load_videos(cfg, cfg.data.eval_container, cfg.data.eval_count, 0x6576ull);
}

RunManifest::RunManifest(const std::string& path, const ExperimentConfig& cfg) : path_(path) {
  config_hash_ = config_hash(cfg);
  doc_["config_hash"] = config_hash_;
  doc_["code_version"] = kVersion;
  doc_["code_version_hash"] = sha1_hex(kVersion);
  doc_["config"] = experiment_to_json(cfg);
  doc_["epochs"] = nlohmann::json::array();
  doc_["artifacts"] = nlohmann::json::array();
}

void RunManifest::add_epoch(const MetricsRecord& rec) {
  doc_["epochs"].push_back({{"epoch", rec.epoch},
                            {"top1", rec.top1},
                            {"top5", rec.top5},
                            {"loss", rec.loss},
                            {"lr", rec.lr},
                            {"seconds", rec.seconds}});
}

void RunManifest::add_artifact(const std::string& name) { doc_["artifacts"].push_back(name); }

void RunManifest::write() const {
  std::ofstream os(path_);
  if (!os) throw IoError("RunManifest: cannot open " + path_);
  os << doc_.dump(2) << "\n";
}

}  // namespace stsep

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stsep/data.hpp"
#include "stsep/eval.hpp"
#include "stsep/model.hpp"

namespace stsep {

struct TrainConfig {
  double lr = 6e-4;
  double weight_decay = 5e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t epochs = 50;
  int64_t batch_size = 32;
  int64_t reference_batch = 256;  // linear lr scaling reference
  double eta_min = 0.0;
  uint64_t seed = 1;

  void validate() const {
    if (lr < 0) throw ConfigError("TrainConfig: lr must be >= 0");
    if (epochs < 0) throw ConfigError("TrainConfig: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (reference_batch < 1) throw ConfigError("TrainConfig: reference_batch must be >= 1");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("TrainConfig: betas must be in [0,1)");
    if (eps <= 0) throw ConfigError("TrainConfig: eps must be > 0");
  }
};

// base lr scales linearly with the batch size; cosine annealing to eta_min
inline double cosine_lr(int64_t epoch, const TrainConfig& cfg) {
  cfg.validate();
  if (epoch < 0 || epoch > cfg.epochs) throw ConfigError("cosine_lr: epoch outside 0..T_max");
  const double base =
      cfg.lr * static_cast<double>(cfg.batch_size) / static_cast<double>(cfg.reference_batch);
  if (cfg.epochs == 0) return base;
  const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
  return cfg.eta_min + (base - cfg.eta_min) * (1.0 + std::cos(3.14159265358979323846 * t)) / 2.0;
}

// One AdamW element update: decoupled decay first, then the bias-corrected
// Adam step. Shared by the tensor-wide step and the scalar oracle tests.
template <std::floating_point S>
void adamw_update(S& theta, S grad, S& m, S& v, int64_t step, double lr, double wd, double beta1,
                  double beta2, double eps) {
  theta -= static_cast<S>(lr * wd) * theta;
  m = static_cast<S>(beta1) * m + static_cast<S>(1.0 - beta1) * grad;
  v = static_cast<S>(beta2) * v + static_cast<S>(1.0 - beta2) * grad * grad;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  const double mhat = static_cast<double>(m) / bc1;
  const double vhat = static_cast<double>(v) / bc2;
  theta -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + eps));
}

template <std::floating_point S>
struct AdamWStateT {
  std::vector<std::vector<S>> m, v;
  int64_t step = 0;

  void init(const std::vector<ParamRef<S>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(static_cast<size_t>(p.tensor->numel()), S(0));
      v.emplace_back(static_cast<size_t>(p.tensor->numel()), S(0));
    }
    step = 0;
  }
};
using AdamWState = AdamWStateT<float>;

template <std::floating_point S>
void adamw_step(const std::vector<ParamRef<S>>& params, AdamWStateT<S>& state, double lr,
                const TrainConfig& cfg) {
  if (state.m.size() != params.size()) throw UsageError("adamw_step: state does not match params");
  state.step += 1;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    TensorT<S>& t = *params[pi].tensor;
    if (!t.has_grad()) continue;
    const std::vector<S>& g = t.grad();
    for (S gv : g)
      if (!std::isfinite(gv))
        throw NumericsError("adamw_step: non-finite gradient in " + params[pi].name);
    S* th = t.data();
    S* m = state.m[pi].data();
    S* v = state.v[pi].data();
    for (int64_t i = 0; i < t.numel(); ++i)
      adamw_update(th[i], g[static_cast<size_t>(i)], m[i], v[i], state.step, lr,
                   cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps);
  }
}

// ---------------------------------------------------------------------------
// checkpoint: "STCK", model tensors (params + bn buffers), optimizer moments,
// JSON trailer (epoch, seed, config hash, rng state)
// ---------------------------------------------------------------------------
struct CheckpointInfo {
  int64_t epoch = 0;
  uint64_t seed = 0;
  std::string config_hash;
  std::string rng_state;
};

void save_checkpoint(const std::string& path, Model& model, const AdamWState* opt,
                     const CheckpointInfo& info);
CheckpointInfo load_checkpoint(const std::string& path, Model& model, AdamWState* opt);

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------
struct TrainResult {
  std::vector<MetricsRecord> history;
  bool diverged = false;
};

struct EvalOptions {
  SamplerSpec sampler;
  int64_t batch_size = 32;
};

// forward every video with the eval sampler and center-crop augmentation
MetricsRecord evaluate_dataset(Model& model, const std::vector<VideoRecord>& videos,
                               const SamplerSpec& eval_sampler, int64_t batch_size);

TrainResult train_loop(Model& model, const std::vector<VideoRecord>& train_videos,
                       const std::vector<VideoRecord>& eval_videos, const TrainConfig& cfg,
                       SamplerSpec sampler, double hflip_prob, AdamWState& opt,
                       const std::function<void(const MetricsRecord&)>& on_epoch = {},
                       int64_t start_epoch = 0);

// assemble a packed [T*N,3,R,R] batch with per-sample deterministic rngs
Tensor assemble_batch(const std::vector<VideoRecord>& videos, const std::vector<int64_t>& picks,
                      const SamplerSpec& sampler, int64_t target_res, double hflip_prob,
                      uint64_t seed, int64_t epoch, std::vector<int>* labels_out);

}  // namespace stsep

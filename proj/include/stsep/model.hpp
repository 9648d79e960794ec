#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "stsep/blocks.hpp"

namespace stsep {

// Ordered sequence of per-step [N,C,H,W] tensors.
template <std::floating_point S>
struct TimeTensorT {
  std::vector<TensorT<S>> steps;

  int64_t T() const { return static_cast<int64_t>(steps.size()); }
  void validate() const {
    if (steps.empty()) throw UsageError("TimeTensor: T must be >= 1");
    for (const auto& s : steps)
      if (s.shape() != steps[0].shape())
        throw UsageError("TimeTensor: steps must share one shape");
  }
  // concatenate along a new leading time axis: [T*N, ...]
  TensorT<S> pack() const {
    validate();
    const Shape& s0 = steps[0].shape();
    std::vector<int64_t> dims{T() * s0[0]};
    for (int i = 1; i < s0.rank(); ++i) dims.push_back(s0[i]);
    TensorT<S> out((Shape(dims)));
    const int64_t per = steps[0].numel();
    for (int64_t t = 0; t < T(); ++t)
      std::copy(steps[static_cast<size_t>(t)].values().begin(),
                steps[static_cast<size_t>(t)].values().end(), out.data() + t * per);
    return out;
  }
  static TimeTensorT unpack(const TensorT<S>& packed, int64_t t_steps) {
    if (packed.shape()[0] % t_steps != 0) throw UsageError("TimeTensor::unpack: bad T");
    const Shape& ps = packed.shape();
    std::vector<int64_t> dims{ps[0] / t_steps};
    for (int i = 1; i < ps.rank(); ++i) dims.push_back(ps[i]);
    Shape step_shape(dims);
    const int64_t per = step_shape.numel();
    TimeTensorT out;
    for (int64_t t = 0; t < t_steps; ++t) {
      TensorT<S> st(step_shape);
      std::copy(packed.data() + t * per, packed.data() + (t + 1) * per, st.data());
      out.steps.push_back(st);
    }
    return out;
  }
};
using TimeTensor = TimeTensorT<float>;

struct BackboneConfig {
  int64_t input_channels = 3;
  std::array<int64_t, 5> widths{64, 64, 128, 256, 512};
  std::array<int, 5> blocks_per_stage{1, 2, 2, 2, 2};  // stage 1 is the stem
  int64_t num_classes = 174;
  int64_t T = 16;
  int64_t resolution = 128;
  NeuronParams neuron;
  StagePolicy policy;
  int64_t r = 4;
  int64_t s = 2;
  double alpha = 0.25;
  double width_multiplier = 1.0;
  TemporalInput temporal_input = TemporalInput::diff;
  bool temporal_conv = true;    // false: "w/o conv" ablation
  bool spatial_branch = true;   // false: "w/o spatial branch" ablation

  int64_t stage_width(int stage_1based) const {
    double w = static_cast<double>(widths[static_cast<size_t>(stage_1based - 1)]) * width_multiplier;
    int64_t iw = static_cast<int64_t>(std::llround(w));
    return std::max<int64_t>(8, iw);
  }

  void validate() const {
    neuron.validate();
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("BackboneConfig: alpha must be in [0,1]");
    if (r < 1 || s < 1) throw ConfigError("BackboneConfig: r and s must be >= 1");
    if (T < 1) throw ConfigError("BackboneConfig: T must be >= 1");
    if (num_classes < 2) throw ConfigError("BackboneConfig: num_classes must be >= 2");
    if (resolution < 16 || resolution % 16 != 0)
      throw ConfigError("BackboneConfig: resolution must be a positive multiple of 16");
    if (width_multiplier <= 0) throw ConfigError("BackboneConfig: width_multiplier must be > 0");
    for (int st = 1; st <= 5; ++st)
      if (policy.stage_stsep(st) && temporal_conv && stage_width(st) % r != 0)
        throw ConfigError("BackboneConfig: stage " + std::to_string(st) +
                          " width not divisible by r");
  }
};

// FLOP accounting: 1 MAC = 1 FLOP for conv/fc (+1 per output element with a
// bias); elementwise costs are bn 2, neuron 2, residual add 1, fusion 4
// (3 at the stem), maxpool k^2 and avg-pool s^2 per output element,
// group-average r per output element, global pool 1 per input element,
// temporal difference 1 per element; pure copies (tile, nearest upsample,
// time shift) cost 0.
namespace flops {
inline int64_t conv(int64_t n, int64_t cout, int64_t oh, int64_t ow, int64_t cin, int64_t k,
                    bool bias = false) {
  int64_t out = n * cout * oh * ow;
  return out * cin * k * k + (bias ? out : 0);
}
}  // namespace flops

template <std::floating_point S>
class ModelT {
 public:
  ModelT() = default;
  ModelT(const BackboneConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x57535450ull));  // weight stream
    const int64_t w1 = cfg_.stage_width(1);
    stem_conv_ = Conv2dT<S>(cfg_.input_channels, w1, 7, 2, 3, false, rng);
    stem_bn_ = BatchNorm2dT<S>(w1);
    if (cfg_.policy.stage_stsep(1)) {
      if (cfg_.temporal_conv)
        stem_branch_ = TemporalBranchT<S>(cfg_.input_channels, w1, 2, cfg_.r, cfg_.s, cfg_.neuron,
                                          true, rng);
      else
        stem_pass_ = PassthroughBranchT<S>(cfg_.input_channels, w1, 2, rng);
    }
    int64_t cin = w1;
    for (int st = 2; st <= 5; ++st) {
      const int64_t cout = cfg_.stage_width(st);
      const int64_t stride = st == 2 ? 1 : 2;
      std::vector<BlockUnitT<S>> stage;
      for (int b = 0; b < cfg_.blocks_per_stage[static_cast<size_t>(st - 1)]; ++b) {
        BlockUnitT<S> unit;
        const int64_t bci = b == 0 ? cin : cout;
        const int64_t bst = b == 0 ? stride : 1;
        unit.spatial = ResidualBlockT<S>(bci, cout, bst, cfg_.neuron, rng);
        if (cfg_.policy.stage_stsep(st)) {
          if (cfg_.temporal_conv)
            unit.temporal =
                TemporalBranchT<S>(bci, cout, bst, cfg_.r, cfg_.s, cfg_.neuron, false, rng);
          else
            unit.passthrough = PassthroughBranchT<S>(bci, cout, bst, rng);
          unit.drop_spatial = !cfg_.spatial_branch;
        }
        stage.push_back(std::move(unit));
      }
      stages_.push_back(std::move(stage));
      cin = cout;
    }
    fc_ = LinearT<S>(cfg_.stage_width(5), cfg_.num_classes, rng);
  }

  const BackboneConfig& config() const { return cfg_; }

  // Forward over a packed [T*N, C, H, W] clip; returns per-step logits
  // [T*N, classes]. `capture` (optional, stage index 1..5) receives that
  // stage's output activations.
  TensorT<S> forward_packed(const TensorT<S>& x, int64_t t_steps, bool training,
                            int capture_stage = 0, TensorT<S>* captured = nullptr) {
    if (x.shape().rank() != 4 || x.shape()[0] % t_steps != 0)
      throw ConfigError("forward_packed: expected packed [T*N,C,H,W] with T=" +
                        std::to_string(t_steps));
    const S alpha = static_cast<S>(cfg_.alpha);
    TensorT<S> h;
    {
      TensorT<S> pre = stem_bn_.forward(stem_conv_.forward(x), training);
      if (cfg_.policy.stage_stsep(1)) {
        TensorT<S> f_s = nsn_step(pre, cfg_.neuron);
        TensorT<S> delta = branch_input(x, t_steps);
        if (calibrating_ && stem_branch_) stem_branch_->calibrate(delta);
        TensorT<S> f_t = stem_branch_ ? stem_branch_->forward(delta) : stem_pass_->forward(delta);
        h = add(scale(f_s, S(1) - alpha), scale(f_t, alpha));
      } else {
        h = cfg_.policy.stage_stateful(1) ? lif_scan(pre, t_steps, cfg_.neuron)
                                          : nsn_step(pre, cfg_.neuron);
      }
    }
    if (capture_stage == 1 && captured) *captured = h;
    h = maxpool2d(h, 3, 2, 1);
    for (int st = 2; st <= 5; ++st) {
      for (auto& unit : stages_[static_cast<size_t>(st - 2)]) {
        if (unit.separated()) {
          TensorT<S> delta = branch_input(h, t_steps);
          if (calibrating_ && unit.temporal) unit.temporal->calibrate(delta);
          TensorT<S> f_t = unit.run_branch(delta);
          TensorT<S> sc = unit.spatial.shortcut(h, training);
          if (unit.drop_spatial) {
            h = add(sc, scale(f_t, alpha));
          } else {
            TensorT<S> f_s = unit.spatial.body_packed(h, t_steps, false, training);
            h = add(add(sc, scale(f_s, S(1) - alpha)), scale(f_t, alpha));
          }
        } else {
          TensorT<S> body =
              unit.spatial.body_packed(h, t_steps, cfg_.policy.stage_stateful(st), training);
          h = add(unit.spatial.shortcut(h, training), body);
        }
      }
      if (capture_stage == st && captured) *captured = h;
    }
    TensorT<S> feat = global_avg_pool(h);
    last_pooled_ = feat;
    return fc_.forward(feat);
  }

  struct ClipOutput {
    TimeTensorT<S> logits_per_step;  // [T][N, classes]
    TensorT<S> avg_logits;           // [N, classes]
  };

  ClipOutput forward_clip(const TimeTensorT<S>& clip, bool training = false) {
    clip.validate();
    if (clip.T() != cfg_.T)
      throw ConfigError("forward_clip: clip has T=" + std::to_string(clip.T()) +
                        " but model expects T=" + std::to_string(cfg_.T));
    return forward_clip_packed(clip.pack(), clip.T(), training);
  }

  ClipOutput forward_clip_packed(const TensorT<S>& packed, int64_t t_steps, bool training) {
    TensorT<S> logits = forward_packed(packed, t_steps, training);
    ClipOutput out;
    out.avg_logits = mean_over_time(logits, t_steps);
    out.logits_per_step = TimeTensorT<S>::unpack(logits, t_steps);
    return out;
  }

  // One-shot data-calibrated init for the temporal branches: rescales each
  // core conv so its pre-NSN RMS on this reference batch sits at tau * V_th.
  // Run after init_temporal_from_spatial, before training; BN running stats
  // are left untouched.
  void calibrate_branches(const TensorT<S>& packed, int64_t t_steps) {
    bool any = stem_branch_.has_value();
    for (auto& stage : stages_)
      for (auto& unit : stage) any = any || unit.temporal.has_value();
    if (!any) return;
    auto bufs = buffers();
    std::vector<std::vector<S>> saved;
    for (auto& b : bufs) saved.push_back(*b.values);
    calibrating_ = true;
    (void)forward_packed(packed, t_steps, true);
    calibrating_ = false;
    for (size_t i = 0; i < bufs.size(); ++i) *bufs[i].values = saved[i];
  }

  // temporal mean of global-pooled stage-5 features, [N, width5]
  TensorT<S> extract_features(const TimeTensorT<S>& clip) {
    clip.validate();
    forward_packed(clip.pack(), clip.T(), false);
    return mean_over_time(last_pooled_, clip.T());
  }

  std::vector<ParamRef<S>> parameters() {
    std::vector<ParamRef<S>> out;
    stem_conv_.collect("stem.conv", out);
    stem_bn_.collect("stem.bn", out);
    if (stem_branch_) stem_branch_->collect("stem.temporal", out);
    if (stem_pass_) stem_pass_->collect("stem.temporal", out);
    for (int st = 2; st <= 5; ++st) {
      auto& stage = stages_[static_cast<size_t>(st - 2)];
      for (size_t b = 0; b < stage.size(); ++b) {
        std::string p = "stage" + std::to_string(st) + ".block" + std::to_string(b);
        if (!(stage[b].drop_spatial)) stage[b].spatial.collect(p, out);
        else {
          // shortcut parameters remain when the spatial body is dropped
          std::vector<ParamRef<S>> all;
          stage[b].spatial.collect(p, all);
          for (auto& pr : all)
            if (pr.name.find(".downsample.") != std::string::npos) out.push_back(pr);
        }
        if (stage[b].temporal) stage[b].temporal->collect(p + ".temporal", out);
        if (stage[b].passthrough) stage[b].passthrough->collect(p + ".temporal", out);
      }
    }
    fc_.collect("head.fc", out);
    return out;
  }

  std::vector<BufferRef<S>> buffers() {
    std::vector<BufferRef<S>> out;
    stem_bn_.collect_buffers("stem.bn", out);
    for (int st = 2; st <= 5; ++st) {
      auto& stage = stages_[static_cast<size_t>(st - 2)];
      for (size_t b = 0; b < stage.size(); ++b) {
        std::string p = "stage" + std::to_string(st) + ".block" + std::to_string(b);
        stage[b].spatial.collect_buffers(p, out);
      }
    }
    return out;
  }

  std::vector<std::vector<BlockUnitT<S>>>& stages() { return stages_; }
  Conv2dT<S>& stem_conv() { return stem_conv_; }
  BatchNorm2dT<S>& stem_bn() { return stem_bn_; }
  std::optional<TemporalBranchT<S>>& stem_branch() { return stem_branch_; }
  LinearT<S>& fc() { return fc_; }

 private:
  TensorT<S> branch_input(const TensorT<S>& x, int64_t t_steps) {
    if (cfg_.temporal_input == TemporalInput::current) return x;
    return sub(x, time_shift(x, t_steps));
  }

  BackboneConfig cfg_;
  Conv2dT<S> stem_conv_;
  BatchNorm2dT<S> stem_bn_;
  std::optional<TemporalBranchT<S>> stem_branch_;
  std::optional<PassthroughBranchT<S>> stem_pass_;
  std::vector<std::vector<BlockUnitT<S>>> stages_;
  LinearT<S> fc_;
  TensorT<S> last_pooled_;
  bool calibrating_ = false;
};
using Model = ModelT<float>;

template <std::floating_point S>
int64_t count_params(ModelT<S>& model) {
  int64_t n = 0;
  for (auto& p : model.parameters()) n += p.tensor->numel();
  return n;
}

// Analytic FLOP count for one clip of `t_steps` frames at `resolution`,
// walking the same geometry as the forward pass.
int64_t count_flops(const BackboneConfig& cfg, int64_t t_steps, int64_t resolution);

// Copy the leading [c_out x c_in] slice of each separated stage's first
// spatial conv into the temporal core conv; falls back silently to the
// existing init when shapes cannot be sliced. Returns copied-core count and
// appends a warning per fallback.
template <std::floating_point S>
int init_temporal_from_spatial(ModelT<S>& model, std::vector<std::string>* warnings = nullptr) {
  int copied = 0;
  auto try_copy = [&](TemporalBranchT<S>& branch, Conv2dT<S>& spatial, const std::string& where) {
    const Shape& cs = branch.core().weight().shape();
    const Shape& ss = spatial.weight().shape();
    if (cs[2] != ss[2] || cs[3] != ss[3] || cs[0] > ss[0] || cs[1] > ss[1]) {
      if (warnings)
        warnings->push_back(where + ": spatial conv " + ss.str() + " cannot seed core " + cs.str());
      return;
    }
    const int64_t k2 = cs[2] * cs[3];
    for (int64_t o = 0; o < cs[0]; ++o)
      for (int64_t i = 0; i < cs[1]; ++i)
        std::copy(spatial.weight().data() + (o * ss[1] + i) * k2,
                  spatial.weight().data() + (o * ss[1] + i) * k2 + k2,
                  branch.core().weight().data() + (o * cs[1] + i) * k2);
    ++copied;
  };
  if (model.stem_branch()) try_copy(*model.stem_branch(), model.stem_conv(), "stem");
  int st = 2;
  for (auto& stage : model.stages()) {
    int b = 0;
    for (auto& unit : stage) {
      if (unit.temporal)
        try_copy(*unit.temporal, unit.spatial.conv1(),
                 "stage" + std::to_string(st) + ".block" + std::to_string(b));
      ++b;
    }
    ++st;
  }
  return copied;
}

}  // namespace stsep

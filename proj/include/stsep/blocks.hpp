#pragma once

#include <functional>
#include <optional>

#include "stsep/nn.hpp"
#include "stsep/spiking.hpp"

namespace stsep {

// ---------------------------------------------------------------------------
// temporal difference with per-layer cache
// ---------------------------------------------------------------------------
template <std::floating_point S>
struct TemporalCacheT {
  TensorT<S> prev;       // X_{t-1}
  int64_t steps_seen = 0;

  void reset() {
    prev = TensorT<S>();
    steps_seen = 0;
  }
  bool fresh() const { return steps_seen == 0; }
};
using TemporalCache = TemporalCacheT<float>;

// delta = X_t - X_{t-1}; X_0 = 0, so the first step returns X_t unchanged.
template <std::floating_point S>
TensorT<S> temporal_diff(const TensorT<S>& x_t, TemporalCacheT<S>& cache) {
  TensorT<S> delta;
  if (cache.fresh()) {
    delta = x_t;
  } else {
    if (cache.prev.shape() != x_t.shape())
      throw UsageError("temporal_diff: cached shape " + cache.prev.shape().str() +
                       " does not match input " + x_t.shape().str());
    delta = sub(x_t, cache.prev);
  }
  cache.prev = x_t;
  cache.steps_seen += 1;
  return delta;
}

// ---------------------------------------------------------------------------
// residual block (SEW "ADD" connect)
// ---------------------------------------------------------------------------
template <std::floating_point S>
struct BlockStateT {
  NeuronStateT<S> n1, n2;
  void reset() {
    n1.reset();
    n2.reset();
  }
};
using BlockState = BlockStateT<float>;

template <std::floating_point S>
class ResidualBlockT {
 public:
  ResidualBlockT() = default;
  ResidualBlockT(int64_t cin, int64_t cout, int64_t stride, NeuronParams neuron, Rng& rng)
      : cin_(cin), cout_(cout), stride_(stride), neuron_(neuron) {
    conv1_ = Conv2dT<S>(cin, cout, 3, stride, 1, false, rng);
    bn1_ = BatchNorm2dT<S>(cout);
    conv2_ = Conv2dT<S>(cout, cout, 3, 1, 1, false, rng);
    bn2_ = BatchNorm2dT<S>(cout);
    if (stride != 1 || cin != cout) {
      ds_conv_ = Conv2dT<S>(cin, cout, 1, stride, 0, false, rng);
      ds_bn_ = BatchNorm2dT<S>(cout);
    }
  }

  bool downsamples() const { return ds_conv_.has_value(); }
  int64_t in_channels() const { return cin_; }
  int64_t out_channels() const { return cout_; }
  int64_t stride() const { return stride_; }
  NeuronParams& neuron() { return neuron_; }
  Conv2dT<S>& conv1() { return conv1_; }

  TensorT<S> shortcut(const TensorT<S>& x, bool training) {
    if (!ds_conv_) return x;
    return ds_bn_->forward(ds_conv_->forward(x), training);
  }

  // conv-bn-neuron x2; neuron_fn is called once per neuron site in order
  TensorT<S> body(const TensorT<S>& x, bool training,
                  const std::function<TensorT<S>(const TensorT<S>&, int)>& neuron_fn) {
    TensorT<S> h = neuron_fn(bn1_.forward(conv1_.forward(x), training), 0);
    return neuron_fn(bn2_.forward(conv2_.forward(h), training), 1);
  }

  // body without the neuron-site spikes replaced: packed LIF over T steps
  TensorT<S> body_packed(const TensorT<S>& x_packed, int64_t t_steps, bool stateful, bool training) {
    auto neuron = [&](const TensorT<S>& v, int) {
      return stateful ? lif_scan(v, t_steps, neuron_) : nsn_step(v, neuron_);
    };
    return body(x_packed, training, neuron);
  }

  void collect(const std::string& p, std::vector<ParamRef<S>>& out) {
    conv1_.collect(p + ".conv1", out);
    bn1_.collect(p + ".bn1", out);
    conv2_.collect(p + ".conv2", out);
    bn2_.collect(p + ".bn2", out);
    if (ds_conv_) {
      ds_conv_->collect(p + ".downsample.conv", out);
      ds_bn_->collect(p + ".downsample.bn", out);
    }
  }
  void collect_buffers(const std::string& p, std::vector<BufferRef<S>>& out) {
    bn1_.collect_buffers(p + ".bn1", out);
    bn2_.collect_buffers(p + ".bn2", out);
    if (ds_bn_) ds_bn_->collect_buffers(p + ".downsample.bn", out);
  }

 private:
  int64_t cin_ = 0, cout_ = 0, stride_ = 1;
  NeuronParams neuron_;
  Conv2dT<S> conv1_, conv2_;
  BatchNorm2dT<S> bn1_, bn2_;
  std::optional<Conv2dT<S>> ds_conv_;
  std::optional<BatchNorm2dT<S>> ds_bn_;
};

// conv-bn-neuron, conv-bn-neuron, added to the (possibly downsampled) input
template <std::floating_point S>
TensorT<S> residual_block_forward(const TensorT<S>& x_t, ResidualBlockT<S>& block,
                                  std::type_identity_t<BlockStateT<S>>* state, bool stateful,
                                  bool training) {
  if (stateful && state == nullptr)
    throw UsageError("residual_block_forward: stateful block requires a state");
  auto neuron = [&](const TensorT<S>& v, int site) {
    if (!stateful) return nsn_step(v, block.neuron());
    NeuronStateT<S>& ns = site == 0 ? state->n1 : state->n2;
    auto [spikes, next] = lif_step(v, ns, block.neuron());
    ns = next;
    return spikes;
  };
  TensorT<S> out = block.body(x_t, training, neuron);
  return add(block.shortcut(x_t, training), out);
}

// ---------------------------------------------------------------------------
// temporal branch: entry scaling -> avg-pool s -> core conv -> NSN ->
// channel restore -> nearest upsample. Bias-free and normalization-free, so
// a zero input maps to exactly zero.
// ---------------------------------------------------------------------------
struct BranchGeometry {
  int64_t core_c = 0;      // core conv channels (C_out / r)
  int64_t pool = 1;        // spatial pool factor before the core
  int64_t up = 1;          // nearest-upsample factor after the core
  int64_t core_in_c = 0;   // channels entering the core conv
  int64_t core_out_h = 0, core_out_w = 0;
  bool entry_proj = false; // 1x1 projection conv at block-input resolution
  int64_t tile = 1;        // channel restore factor
};

// Shared by the forward pass and the FLOP counter so both walk one geometry.
inline BranchGeometry temporal_branch_geometry(int64_t cin, int64_t cout, int64_t h, int64_t w,
                                               int64_t r, int64_t s, int64_t stride, int64_t core_k,
                                               bool stem) {
  if (cout % r != 0)
    throw ConfigError("temporal branch: channels " + std::to_string(cout) +
                      " not divisible by r=" + std::to_string(r));
  BranchGeometry g;
  g.core_c = cout / r;
  g.pool = (h % s == 0 && w % s == 0 && h / s >= 1) ? s : 1;
  const bool ds = stem || stride != 1 || cin != cout;
  g.entry_proj = ds && !stem;
  g.core_in_c = stem ? cin : g.core_c;
  const int64_t ph = h / g.pool, pw = w / g.pool;
  g.core_out_h = detail::conv_out_dim(ph, core_k, stride, core_k / 2);
  g.core_out_w = detail::conv_out_dim(pw, core_k, stride, core_k / 2);
  // the spatial path's output resolution: its first conv is 3x3 pad 1
  // (7x7 pad 3 at the stem) with the same stride
  const int64_t spatial_k = stem ? 7 : 3;
  const int64_t target_h = detail::conv_out_dim(h, spatial_k, stride, spatial_k / 2);
  if (g.core_out_h < 1 || target_h % g.core_out_h != 0)
    throw ConfigError("temporal branch: spatial geometry does not restore block output");
  g.up = target_h / g.core_out_h;
  g.tile = cout / g.core_c;
  return g;
}

template <std::floating_point S>
class TemporalBranchT {
 public:
  TemporalBranchT() = default;
  // stem=true builds the 7x7 stride-2 companion of conv_1 (raw input channels)
  TemporalBranchT(int64_t cin, int64_t cout, int64_t stride, int64_t r, int64_t s,
                  NeuronParams neuron, bool stem, Rng& rng)
      : cin_(cin), cout_(cout), stride_(stride), r_(r), s_(s), stem_(stem), neuron_(neuron) {
    core_k_ = stem ? 7 : 3;
    const int64_t core_c = cout / r;
    const bool ds = stride != 1 || cin != cout;
    if (!stem && ds) proj_ = Conv2dT<S>(cin, core_c, 1, 1, 0, false, rng);
    core_ = Conv2dT<S>(stem ? cin : core_c, core_c, core_k_, stride, core_k_ / 2, false, rng);
  }

  // branch up to the core conv output (the NSN input)
  TensorT<S> pre_nsn(const TensorT<S>& x) {
    auto g = temporal_branch_geometry(cin_, cout_, x.shape()[2], x.shape()[3], r_, s_, stride_,
                                      core_k_, stem_);
    TensorT<S> h = x;
    if (g.entry_proj) h = proj_->forward(h);
    else if (!stem_) h = channel_group_mean(h, cin_ / g.core_c);
    h = avgpool2d(h, g.pool);
    return core_.forward(h);
  }

  TensorT<S> forward(const TensorT<S>& x) {
    auto g = temporal_branch_geometry(cin_, cout_, x.shape()[2], x.shape()[3], r_, s_, stride_,
                                      core_k_, stem_);
    TensorT<S> h = nsn_step(pre_nsn(x), neuron_);
    h = channel_tile(h, g.tile);
    return upsample_nearest(h, g.up);
  }

  // The branch carries no normalization (zero input must map to exactly
  // zero), so the copied-weight scale is arbitrary relative to the spike
  // threshold. Rescale the core weights so the pre-NSN RMS on a reference
  // activation lands at tau * V_th, putting the threshold at one RMS.
  void calibrate(const TensorT<S>& reference_delta) {
    GraphT<S>* tape = GraphT<S>::active();
    if (tape != nullptr) throw UsageError("TemporalBranch::calibrate: not usable under recording");
    TensorT<S> pre = pre_nsn(reference_delta);
    double sq = 0;
    for (S v : pre.values()) sq += static_cast<double>(v) * v;
    const double rms = std::sqrt(sq / static_cast<double>(pre.numel()));
    if (rms <= 0) return;
    const double target = neuron_.tau * neuron_.v_threshold;
    const S gain = static_cast<S>(target / rms);
    for (auto& w : core_.weight().values()) w *= gain;
  }

  Conv2dT<S>& core() { return core_; }
  int64_t core_kernel() const { return core_k_; }

  void collect(const std::string& p, std::vector<ParamRef<S>>& out) {
    if (proj_) proj_->collect(p + ".proj", out);
    core_.collect(p + ".core", out);
  }

 private:
  int64_t cin_ = 0, cout_ = 0, stride_ = 1, r_ = 4, s_ = 2, core_k_ = 3;
  bool stem_ = false;
  NeuronParams neuron_;
  std::optional<Conv2dT<S>> proj_;
  Conv2dT<S> core_;
};

// "w/o conv" variant: the branch is the difference signal itself, with a 1x1
// conv only where the block changes dimensions.
template <std::floating_point S>
class PassthroughBranchT {
 public:
  PassthroughBranchT() = default;
  PassthroughBranchT(int64_t cin, int64_t cout, int64_t stride, Rng& rng) {
    if (stride != 1 || cin != cout) adjust_ = Conv2dT<S>(cin, cout, 1, stride, 0, false, rng);
  }
  TensorT<S> forward(const TensorT<S>& x) { return adjust_ ? adjust_->forward(x) : x; }
  void collect(const std::string& p, std::vector<ParamRef<S>>& out) {
    if (adjust_) adjust_->collect(p + ".adjust", out);
  }
  bool has_adjust() const { return adjust_.has_value(); }

 private:
  std::optional<Conv2dT<S>> adjust_;
};

enum class TemporalInput { diff, current };  // "current" is the w/o-diff ablation

// One stage unit: spatial residual block plus, when the stage is separated,
// its temporal companion.
template <std::floating_point S>
struct BlockUnitT {
  ResidualBlockT<S> spatial;
  std::optional<TemporalBranchT<S>> temporal;
  std::optional<PassthroughBranchT<S>> passthrough;  // w/o-conv variant
  bool drop_spatial = false;                         // w/o-spatial-branch variant

  bool separated() const { return temporal.has_value() || passthrough.has_value(); }
  TensorT<S> run_branch(const TensorT<S>& delta) {
    return temporal ? temporal->forward(delta) : passthrough->forward(delta);
  }
};

// X_{t+1} = shortcut(X) + (1-a) F_s + a F_t, with F_s from non-stateful
// neurons and F_t from the branch on the (cached) temporal difference.
template <std::floating_point S>
TensorT<S> stsep_block_forward(const TensorT<S>& x_t, BlockUnitT<S>& unit,
                               TemporalCacheT<S>& cache, S alpha, bool training,
                               TemporalInput tin = TemporalInput::diff) {
  if (!unit.separated()) throw UsageError("stsep_block_forward: stage is not separated");
  TensorT<S> delta = tin == TemporalInput::diff ? temporal_diff(x_t, cache) : x_t;
  TensorT<S> f_t = unit.run_branch(delta);
  TensorT<S> sc = unit.spatial.shortcut(x_t, training);
  if (unit.drop_spatial) return add(sc, scale(f_t, alpha));
  TensorT<S> f_s = unit.spatial.body_packed(x_t, 1, false, training);
  return add(add(sc, scale(f_s, S(1) - alpha)), scale(f_t, alpha));
}

}  // namespace stsep

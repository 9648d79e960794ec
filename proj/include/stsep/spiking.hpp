#pragma once

#include <array>
#include <utility>

#include "stsep/ops.hpp"
#include "stsep/tensor.hpp"

namespace stsep {

struct NeuronParams {
  double tau = 2.0;
  double v_threshold = 1.0;
  double surrogate_width = 0.5;
  // Test-only mode: the forward threshold becomes the piecewise-linear ramp
  // whose analytic derivative equals the rectangular surrogate, so finite
  // differences of the forward match the backward.
  bool smooth = false;

  void validate() const {
    if (tau < 1.0) throw ConfigError("NeuronParams: tau must be >= 1");
    if (v_threshold <= 0.0) throw ConfigError("NeuronParams: v_threshold must be > 0");
    if (surrogate_width <= 0.0) throw ConfigError("NeuronParams: surrogate_width must be > 0");
  }
};

namespace detail {

template <std::floating_point S>
S spike_value(S v_minus_th, S width, bool smooth) {
  if (!smooth) return v_minus_th >= S(0) ? S(1) : S(0);  // fire at equality
  S y = v_minus_th / (S(2) * width) + S(0.5);
  return std::clamp(y, S(0), S(1));
}

template <std::floating_point S>
S surrogate_grad(S v_minus_th, S width) {
  return std::abs(v_minus_th) <= width ? S(1) / (S(2) * width) : S(0);
}

}  // namespace detail

// S = Theta(v - th); backward routes through the rectangular window.
template <std::floating_point S>
TensorT<S> spike_threshold(const TensorT<S>& v, S th, S width, bool smooth) {
  if (width <= S(0)) throw ConfigError("spike_threshold: width must be > 0");
  bool req = v.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(v.shape(), req);
  const int64_t n = v.numel();
  for (int64_t i = 0; i < n; ++i)
    out.data()[i] = detail::spike_value(v.data()[i] - th, width, smooth);
  if (detail::recording<S>(req)) {
    auto vd = v, od = out;
    GraphT<S>::active()->push([vd, od, th, width]() mutable {
      auto& gv = vd.grad_buffer();
      const std::vector<S>& go = od.grad_buffer();
      const int64_t n2 = od.numel();
      for (int64_t i = 0; i < n2; ++i)
        gv[static_cast<size_t>(i)] +=
            go[static_cast<size_t>(i)] * detail::surrogate_grad(vd.data()[i] - th, width);
    });
  }
  return out;
}

template <std::floating_point S>
TensorT<S> heaviside_surrogate(const TensorT<S>& v_minus_thresh, S width, bool smooth = false) {
  return spike_threshold(v_minus_thresh, S(0), width, smooth);
}

// Per-layer state carried between time steps: V_{t-1} and S_{t-1}.
template <std::floating_point S>
struct NeuronStateT {
  TensorT<S> v_prev;
  TensorT<S> s_prev;
  bool fresh = true;

  void reset() {
    v_prev = TensorT<S>();
    s_prev = TensorT<S>();
    fresh = true;
  }
};
using NeuronState = NeuronStateT<float>;

// V_t = (1-1/tau) * V_{t-1} (1 - S_{t-1}) + (1/tau) * I_t.
// In hard mode the reset factor (1 - S_{t-1}) is a constant in backward
// (gradient flows into V_{t-1} and I_t only); that omission is exact almost
// everywhere because the hard spike is locally constant. In smooth test mode
// the spike is a ramp, so the reset path carries real gradient and is
// included to keep the backward the true derivative of the forward.
template <std::floating_point S>
TensorT<S> lif_integrate(const TensorT<S>& i_t, const TensorT<S>& v_prev,
                         const TensorT<S>& s_prev, S leak, S input_scale,
                         bool grad_through_reset = false) {
  if (i_t.shape() != v_prev.shape() || i_t.shape() != s_prev.shape())
    throw UsageError("lif_integrate: state shape " + v_prev.shape().str() +
                     " does not match input " + i_t.shape().str());
  bool req = i_t.requires_grad() || v_prev.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(i_t.shape(), req);
  const int64_t n = i_t.numel();
  for (int64_t i = 0; i < n; ++i)
    out.data()[i] =
        leak * v_prev.data()[i] * (S(1) - s_prev.data()[i]) + input_scale * i_t.data()[i];
  detail::finite_check(out, "lif_integrate");
  if (detail::recording<S>(req)) {
    auto id = i_t, vd = v_prev, sd = s_prev, od = out;
    GraphT<S>::active()->push([id, vd, sd, od, leak, input_scale, grad_through_reset]() mutable {
      const std::vector<S>& go = od.grad_buffer();
      const int64_t n2 = od.numel();
      for (int64_t i = 0; i < n2; ++i) {
        const S g = go[static_cast<size_t>(i)];
        if (id.requires_grad()) id.grad_buffer()[static_cast<size_t>(i)] += input_scale * g;
        if (vd.requires_grad())
          vd.grad_buffer()[static_cast<size_t>(i)] += leak * (S(1) - sd.data()[i]) * g;
        if (grad_through_reset && sd.requires_grad())
          sd.grad_buffer()[static_cast<size_t>(i)] += -leak * vd.data()[i] * g;
      }
    });
  }
  return out;
}

// One LIF step. A fresh state counts as all-zero V and S.
template <std::floating_point S>
std::pair<TensorT<S>, NeuronStateT<S>> lif_step(const TensorT<S>& i_t, const NeuronStateT<S>& state,
                                                const NeuronParams& params) {
  params.validate();
  TensorT<S> v_prev = state.fresh ? TensorT<S>(i_t.shape()) : state.v_prev;
  TensorT<S> s_prev = state.fresh ? TensorT<S>(i_t.shape()) : state.s_prev;
  const S leak = static_cast<S>(1.0 - 1.0 / params.tau);
  const S in_scale = static_cast<S>(1.0 / params.tau);
  TensorT<S> v_t = lif_integrate(i_t, v_prev, s_prev, leak, in_scale, params.smooth);
  TensorT<S> s_t = spike_threshold(v_t, static_cast<S>(params.v_threshold),
                                   static_cast<S>(params.surrogate_width), params.smooth);
  NeuronStateT<S> next;
  next.v_prev = v_t;
  next.s_prev = s_t;
  next.fresh = false;
  return {s_t, next};
}

// Non-stateful neuron: S = Theta((1/tau) I - V_th), no state read or written.
template <std::floating_point S>
TensorT<S> nsn_step(const TensorT<S>& i_t, const NeuronParams& params) {
  params.validate();
  TensorT<S> v = scale(i_t, static_cast<S>(1.0 / params.tau));
  return spike_threshold(v, static_cast<S>(params.v_threshold),
                         static_cast<S>(params.surrogate_width), params.smooth);
}

// Fused LIF scan over a packed [T*N, ...] buffer: time steps advance
// sequentially inside the op, backward replays them in reverse (BPTT across
// the whole clip, reset factor constant).
template <std::floating_point S>
TensorT<S> lif_scan(const TensorT<S>& i_packed, int64_t t_steps, const NeuronParams& params) {
  params.validate();
  if (t_steps < 1 || i_packed.shape()[0] % t_steps != 0)
    throw UsageError("lif_scan: leading extent not divisible by T");
  const int64_t per = i_packed.numel() / t_steps;
  const S leak = static_cast<S>(1.0 - 1.0 / params.tau);
  const S in_scale = static_cast<S>(1.0 / params.tau);
  const S th = static_cast<S>(params.v_threshold);
  const S width = static_cast<S>(params.surrogate_width);

  bool req = i_packed.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(i_packed.shape(), req);
  std::vector<S> v_hist(static_cast<size_t>(i_packed.numel()));
  for (int64_t t = 0; t < t_steps; ++t) {
    const S* in = i_packed.data() + t * per;
    S* v_now = v_hist.data() + t * per;
    S* s_now = out.data() + t * per;
    if (t == 0) {
      for (int64_t i = 0; i < per; ++i) v_now[i] = in_scale * in[i];
    } else {
      const S* v_old = v_hist.data() + (t - 1) * per;
      const S* s_old = out.data() + (t - 1) * per;
      for (int64_t i = 0; i < per; ++i)
        v_now[i] = leak * v_old[i] * (S(1) - s_old[i]) + in_scale * in[i];
    }
    for (int64_t i = 0; i < per; ++i)
      s_now[i] = detail::spike_value(v_now[i] - th, width, params.smooth);
  }
  detail::finite_check(out, "lif_scan");

  if (detail::recording<S>(req)) {
    auto id = i_packed, od = out;
    const bool smooth = params.smooth;
    GraphT<S>::active()->push([id, od, v_hist = std::move(v_hist), t_steps, per, leak, in_scale,
                               th, width, smooth]() mutable {
      auto& gi = id.grad_buffer();
      const std::vector<S>& gs = od.grad_buffer();
      std::vector<S> gv_next(static_cast<size_t>(per), S(0));
      for (int64_t t = t_steps - 1; t >= 0; --t) {
        const S* v_now = v_hist.data() + t * per;
        const S* s_now = od.data() + t * per;
        const S* g_spike = gs.data() + t * per;
        S* g_in = gi.data() + t * per;
        for (int64_t i = 0; i < per; ++i) {
          // dL/dS_t: the spike output itself, plus (smooth mode only) the
          // reset path into V_{t+1} = leak * V_t (1 - S_t) + ...
          S g_s = g_spike[i];
          if (smooth) g_s += -leak * v_now[i] * gv_next[i];
          const S gv = g_s * detail::surrogate_grad(v_now[i] - th, width) +
                       leak * (S(1) - s_now[i]) * gv_next[i];
          g_in[i] += in_scale * gv;
          gv_next[i] = gv;
        }
      }
    });
  }
  return out;
}

// Per-stage stateful / separation flags; index 0 is stage 1 (the stem).
struct StagePolicy {
  std::array<bool, 5> stateful{true, true, true, true, true};
  std::array<bool, 5> stsep{false, false, false, false, false};

  bool stage_stateful(int stage_1based) const { return stateful[static_cast<size_t>(stage_1based - 1)]; }
  bool stage_stsep(int stage_1based) const { return stsep[static_cast<size_t>(stage_1based - 1)]; }

  StagePolicy& set_stsep(const std::vector<int>& stages_1based) {
    for (int s : stages_1based) {
      if (s < 1 || s > 5) throw ConfigError("StagePolicy: stsep stage out of range 1..5");
      stsep[static_cast<size_t>(s - 1)] = true;
    }
    return *this;
  }
};

enum class PolicyMode { vanilla, ns, rns };

// ns(k): stages 1..k stateless; rns(k): stages 6-k..5 stateless; vanilla == ns(0)
inline StagePolicy make_policy(PolicyMode mode, int k = 0) {
  if (k < 0 || k > 5) throw ConfigError("make_policy: k must be in 0..5");
  StagePolicy p;
  switch (mode) {
    case PolicyMode::vanilla:
      break;
    case PolicyMode::ns:
      for (int s = 1; s <= k; ++s) p.stateful[static_cast<size_t>(s - 1)] = false;
      break;
    case PolicyMode::rns:
      for (int s = 6 - k; s <= 5; ++s) p.stateful[static_cast<size_t>(s - 1)] = false;
      break;
  }
  return p;
}

}  // namespace stsep

#pragma once

// Shared test-only helpers: finite-difference gradient harness (64-bit
// shadow evaluation) and small scalar reference oracles, independent of the
// library's backward implementations.

#include <cmath>
#include <functional>
#include <vector>

#include "stsep/ops.hpp"
#include "stsep/tensor.hpp"

namespace testutil {

using stsep::GraphT;
using stsep::Rng;
using stsep::Shape;
using stsep::TensorT;

inline TensorT<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                                     bool requires_grad = true) {
  TensorT<double> t(shape);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  t.set_requires_grad(requires_grad);
  return t;
}

// Scalar loss: fixed random linear combination of the output entries, so
// asymmetric gradient bugs cannot cancel.
struct FdCheck {
  double max_rel_err = 0.0;
  int checked = 0;
};

// fn must rebuild the whole forward from the current input values.
inline FdCheck fd_gradcheck(const std::function<TensorT<double>()>& fn,
                            std::vector<TensorT<double>> inputs, Rng& rng, double step = 1e-3,
                            int max_elems_per_input = 64) {
  TensorT<double> out = fn();
  std::vector<double> combo(static_cast<size_t>(out.numel()));
  for (auto& c : combo) c = rng.uniform(-1.0, 1.0);

  auto loss_of = [&]() {
    TensorT<double> o = fn();
    double l = 0;
    for (int64_t i = 0; i < o.numel(); ++i) l += combo[static_cast<size_t>(i)] * o.data()[i];
    return l;
  };

  // autodiff pass
  for (auto& in : inputs) in.zero_grad();
  GraphT<double> g;
  {
    GraphT<double>::Record rec(g);
    TensorT<double> o = fn();
    TensorT<double> weights = TensorT<double>::from(o.shape(), combo);
    TensorT<double> weighted = stsep::mul(o, weights);
    TensorT<double> loss = stsep::sum(weighted);
    stsep::backward(g, loss);
  }

  FdCheck result;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    const std::vector<double> grads = in.has_grad() ? in.grad() : std::vector<double>(static_cast<size_t>(in.numel()), 0.0);
    const int64_t n = in.numel();
    const int64_t stride = std::max<int64_t>(1, n / max_elems_per_input);
    for (int64_t i = 0; i < n; i += stride) {
      const double saved = in.data()[i];
      in.data()[i] = saved + step;
      const double lp = loss_of();
      in.data()[i] = saved - step;
      const double lm = loss_of();
      in.data()[i] = saved;
      const double fd = (lp - lm) / (2 * step);
      const double ad = grads[static_cast<size_t>(i)];
      const double denom = std::max({std::abs(ad), std::abs(fd), 1e-2});
      result.max_rel_err = std::max(result.max_rel_err, std::abs(ad - fd) / denom);
      result.checked += 1;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// scalar double-precision reference implementations (oracles)
// ---------------------------------------------------------------------------

// plain quadruple-loop cross-correlation
inline std::vector<double> conv2d_ref(const std::vector<double>& x, int64_t n, int64_t cin,
                                      int64_t h, int64_t w, const std::vector<double>& wt,
                                      int64_t cout, int64_t kh, int64_t kw, int64_t stride,
                                      int64_t pad, const std::vector<double>* bias = nullptr) {
  const int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const int64_t ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<size_t>(n * cout * oh * ow), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t co = 0; co < cout; ++co)
      for (int64_t r = 0; r < oh; ++r)
        for (int64_t q = 0; q < ow; ++q) {
          double acc = bias ? (*bias)[static_cast<size_t>(co)] : 0.0;
          for (int64_t ci = 0; ci < cin; ++ci)
            for (int64_t ki = 0; ki < kh; ++ki)
              for (int64_t kj = 0; kj < kw; ++kj) {
                const int64_t ih = r * stride - pad + ki;
                const int64_t iw = q * stride - pad + kj;
                if (ih < 0 || ih >= h || iw < 0 || iw >= w) continue;
                acc += x[static_cast<size_t>(((i * cin + ci) * h + ih) * w + iw)] *
                       wt[static_cast<size_t>(((co * cin + ci) * kh + ki) * kw + kj)];
              }
          out[static_cast<size_t>(((i * cout + co) * oh + r) * ow + q)] = acc;
        }
  return out;
}

// one LIF step on scalars, literal transcription of the update
struct LifRef {
  double v = 0.0, s = 0.0;
  double step(double input, double tau, double v_th) {
    v = (1.0 - 1.0 / tau) * v * (1.0 - s) + (1.0 / tau) * input;
    s = v >= v_th ? 1.0 : 0.0;
    return s;
  }
};

inline std::vector<double> batchnorm_ref(const std::vector<double>& x, int64_t n, int64_t c,
                                         int64_t hw, double gamma, double beta, double eps) {
  std::vector<double> out(x.size());
  for (int64_t ch = 0; ch < c; ++ch) {
    double s1 = 0, s2 = 0;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < hw; ++j) {
        const double v = x[static_cast<size_t>((i * c + ch) * hw + j)];
        s1 += v;
        s2 += v * v;
      }
    const double cnt = static_cast<double>(n * hw);
    const double mu = s1 / cnt;
    const double var = s2 / cnt - mu * mu;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < hw; ++j) {
        const size_t idx = static_cast<size_t>((i * c + ch) * hw + j);
        out[idx] = gamma * (x[idx] - mu) / std::sqrt(var + eps) + beta;
      }
  }
  return out;
}

}  // namespace testutil

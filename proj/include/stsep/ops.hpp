#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "stsep/gemm.hpp"
#include "stsep/tensor.hpp"

namespace stsep {

namespace detail {

template <std::floating_point S>
void finite_check(const TensorT<S>& t, const char* op) {
  for (S v : t.values())
    if (!std::isfinite(v))
      throw NumericsError(std::string(op) + ": non-finite value in output");
}

template <std::floating_point S>
TensorT<S> alloc_out(Shape shape, bool requires_grad) {
  TensorT<S> t(shape);
  t.set_requires_grad(requires_grad);
  if (auto* g = GraphT<S>::active()) t.ptr()->tape = g;
  return t;
}

template <std::floating_point S>
bool recording(bool requires_grad) {
  return requires_grad && GraphT<S>::active() != nullptr;
}

inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// col[K = Cin*kh*kw, M = N*OH*OW], row-major
template <std::floating_point S>
void im2col(const S* x, int64_t n_img, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t oh, int64_t ow, S* col) {
  const int64_t m = n_img * oh * ow;
  for (int64_t ci = 0; ci < cin; ++ci) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        S* row = col + ((ci * kh + ki) * kw + kj) * m;
        const int64_t off_h = ki - pad;
        const int64_t off_w = kj - pad;
        // valid output-column range for this kernel offset
        int64_t lo = 0, hi = ow;  // [lo, hi)
        if (off_w < 0) lo = (-off_w + stride - 1) / stride;
        if (off_w + (ow - 1) * stride >= w) hi = (w - off_w + stride - 1) / stride;
        if (hi < lo) hi = lo;
        for (int64_t n = 0; n < n_img; ++n) {
          const S* img = x + (n * cin + ci) * h * w;
          for (int64_t r = 0; r < oh; ++r) {
            S* dst = row + (n * oh + r) * ow;
            const int64_t ih = r * stride + off_h;
            if (ih < 0 || ih >= h) {
              std::memset(dst, 0, sizeof(S) * static_cast<size_t>(ow));
              continue;
            }
            const S* src = img + ih * w;
            if (lo > 0) std::memset(dst, 0, sizeof(S) * static_cast<size_t>(lo));
            if (hi < ow) std::memset(dst + hi, 0, sizeof(S) * static_cast<size_t>(ow - hi));
            if (stride == 1) {
              std::memcpy(dst + lo, src + lo + off_w, sizeof(S) * static_cast<size_t>(hi - lo));
            } else {
              for (int64_t c = lo; c < hi; ++c) dst[c] = src[c * stride + off_w];
            }
          }
        }
      }
    }
  }
}

template <std::floating_point S>
void col2im(const S* col, int64_t n_img, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t oh, int64_t ow, S* gx) {
  const int64_t m = n_img * oh * ow;
  for (int64_t ci = 0; ci < cin; ++ci) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const S* row = col + ((ci * kh + ki) * kw + kj) * m;
        const int64_t off_h = ki - pad;
        const int64_t off_w = kj - pad;
        int64_t lo = 0, hi = ow;
        if (off_w < 0) lo = (-off_w + stride - 1) / stride;
        if (off_w + (ow - 1) * stride >= w) hi = (w - off_w + stride - 1) / stride;
        if (hi < lo) hi = lo;
        for (int64_t n = 0; n < n_img; ++n) {
          S* img = gx + (n * cin + ci) * h * w;
          for (int64_t r = 0; r < oh; ++r) {
            const S* src = row + (n * oh + r) * ow;
            const int64_t ih = r * stride + off_h;
            if (ih < 0 || ih >= h) continue;
            S* dst = img + ih * w;
            for (int64_t c = lo; c < hi; ++c) dst[c * stride + off_w] += src[c];
          }
        }
      }
    }
  }
}

template <std::floating_point S>
std::vector<S>& scratch(int which) {
  thread_local std::vector<S> bufs[3];
  return bufs[which];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, [N,Cin,H,W] x [Cout,Cin,kh,kw] -> [N,Cout,OH,OW]
// ---------------------------------------------------------------------------
template <std::floating_point S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const std::optional<TensorT<S>>& bias,
                  int64_t stride, int64_t pad) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.rank() != 4 || ws.rank() != 4) throw ConfigError("conv2d: expects 4-d input and weight");
  if (xs[1] != ws[1])
    throw ConfigError("conv2d: input channels " + std::to_string(xs[1]) + " != weight channels " +
                      std::to_string(ws[1]));
  const int64_t n = xs[0], cin = xs[1], h = xs[2], wdt = xs[3];
  const int64_t cout = ws[0], kh = ws[2], kw = ws[3];
  if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("conv2d: kernel extents must be odd");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  const int64_t oh = detail::conv_out_dim(h, kh, stride, pad);
  const int64_t ow = detail::conv_out_dim(wdt, kw, stride, pad);
  if (oh < 1 || ow < 1) throw ConfigError("conv2d: empty output for input " + xs.str());
  if (bias && (bias->shape().rank() != 1 || bias->shape()[0] != cout))
    throw ConfigError("conv2d: bias shape mismatch");

  const int64_t k = cin * kh * kw;
  const int64_t m = n * oh * ow;
  auto& col = detail::scratch<S>(0);
  col.resize(static_cast<size_t>(k * m));
  detail::im2col(x.data(), n, cin, h, wdt, kh, kw, stride, pad, oh, ow, col.data());

  auto& tmp = detail::scratch<S>(1);
  tmp.resize(static_cast<size_t>(cout * m));
  gemm<S>(false, false, static_cast<int>(cout), static_cast<int>(m), static_cast<int>(k), S(1),
          w.data(), static_cast<int>(k), col.data(), static_cast<int>(m), S(0), tmp.data(),
          static_cast<int>(m));

  bool req = x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad());
  TensorT<S> out = detail::alloc_out<S>(Shape{n, cout, oh, ow}, req);
  const int64_t hw = oh * ow;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t co = 0; co < cout; ++co) {
      const S* src = tmp.data() + co * m + i * hw;
      S* dst = out.data() + (i * cout + co) * hw;
      if (bias) {
        const S b = bias->data()[co];
        for (int64_t j = 0; j < hw; ++j) dst[j] = src[j] + b;
      } else {
        std::memcpy(dst, src, sizeof(S) * static_cast<size_t>(hw));
      }
    }
  detail::finite_check(out, "conv2d");

  if (detail::recording<S>(req)) {
    auto xd = x, wd = w, od = out;
    std::optional<TensorT<S>> bd = bias;
    GraphT<S>::active()->push([xd, wd, bd, od, stride, pad]() mutable {
      const Shape& xs2 = xd.shape();
      const Shape& ws2 = wd.shape();
      const int64_t n2 = xs2[0], cin2 = xs2[1], h2 = xs2[2], w2 = xs2[3];
      const int64_t cout2 = ws2[0], kh2 = ws2[2], kw2 = ws2[3];
      const int64_t oh2 = od.shape()[2], ow2 = od.shape()[3];
      const int64_t k2 = cin2 * kh2 * kw2, m2 = n2 * oh2 * ow2, hw2 = oh2 * ow2;
      const std::vector<S>& go = od.grad_buffer();

      // permute incoming grad to [Cout, N*OH*OW]
      auto& gtmp = detail::scratch<S>(1);
      gtmp.resize(static_cast<size_t>(cout2 * m2));
      for (int64_t i = 0; i < n2; ++i)
        for (int64_t co = 0; co < cout2; ++co)
          std::memcpy(gtmp.data() + co * m2 + i * hw2, go.data() + (i * cout2 + co) * hw2,
                      sizeof(S) * static_cast<size_t>(hw2));

      if (bd && bd->requires_grad()) {
        auto& gb = bd->grad_buffer();
        for (int64_t co = 0; co < cout2; ++co) {
          double acc = 0;
          const S* r = gtmp.data() + co * m2;
          for (int64_t j = 0; j < m2; ++j) acc += static_cast<double>(r[j]);
          gb[static_cast<size_t>(co)] += static_cast<S>(acc);
        }
      }
      if (wd.requires_grad() || xd.requires_grad()) {
        auto& col2 = detail::scratch<S>(0);
        if (wd.requires_grad()) {
          col2.resize(static_cast<size_t>(k2 * m2));
          detail::im2col(xd.data(), n2, cin2, h2, w2, kh2, kw2, stride, pad, oh2, ow2, col2.data());
          gemm<S>(false, true, static_cast<int>(cout2), static_cast<int>(k2), static_cast<int>(m2),
                  S(1), gtmp.data(), static_cast<int>(m2), col2.data(), static_cast<int>(m2), S(1),
                  wd.grad_buffer().data(), static_cast<int>(k2));
        }
        if (xd.requires_grad()) {
          auto& gcol = detail::scratch<S>(2);
          gcol.resize(static_cast<size_t>(k2 * m2));
          gemm<S>(true, false, static_cast<int>(k2), static_cast<int>(m2), static_cast<int>(cout2),
                  S(1), wd.data(), static_cast<int>(k2), gtmp.data(), static_cast<int>(m2), S(0),
                  gcol.data(), static_cast<int>(m2));
          detail::col2im(gcol.data(), n2, cin2, h2, w2, kh2, kw2, stride, pad, oh2, ow2,
                         xd.grad_buffer().data());
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batchnorm over the leading batch axis (per channel, biased batch variance)
// ---------------------------------------------------------------------------
template <std::floating_point S>
TensorT<S> batchnorm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                     std::vector<S>& running_mean, std::vector<S>& running_var, bool training,
                     double momentum, double eps) {
  if (eps <= 0) throw ConfigError("batchnorm: eps must be > 0");
  const Shape& xs = x.shape();
  if (xs.rank() != 4) throw ConfigError("batchnorm: expects 4-d input");
  const int64_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  if (gamma.numel() != c || beta.numel() != c || static_cast<int64_t>(running_mean.size()) != c ||
      static_cast<int64_t>(running_var.size()) != c)
    throw ConfigError("batchnorm: channel state does not match input channels");

  const int64_t hw = h * w;
  const int64_t cnt = n * hw;
  bool req = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(xs, req);

  std::vector<S> mean(static_cast<size_t>(c)), var(static_cast<size_t>(c));
  if (training) {
    for (int64_t ch = 0; ch < c; ++ch) {
      double s1 = 0, s2 = 0;
      for (int64_t i = 0; i < n; ++i) {
        const S* p = x.data() + (i * c + ch) * hw;
        for (int64_t j = 0; j < hw; ++j) {
          double v = static_cast<double>(p[j]);
          s1 += v;
          s2 += v * v;
        }
      }
      double mu = s1 / static_cast<double>(cnt);
      double va = s2 / static_cast<double>(cnt) - mu * mu;
      if (va < 0) va = 0;
      mean[static_cast<size_t>(ch)] = static_cast<S>(mu);
      var[static_cast<size_t>(ch)] = static_cast<S>(va);
      double unbiased = cnt > 1 ? va * static_cast<double>(cnt) / static_cast<double>(cnt - 1) : va;
      running_mean[static_cast<size_t>(ch)] =
          static_cast<S>((1.0 - momentum) * running_mean[static_cast<size_t>(ch)] + momentum * mu);
      running_var[static_cast<size_t>(ch)] = static_cast<S>(
          (1.0 - momentum) * running_var[static_cast<size_t>(ch)] + momentum * unbiased);
    }
  } else {
    for (int64_t ch = 0; ch < c; ++ch) {
      mean[static_cast<size_t>(ch)] = running_mean[static_cast<size_t>(ch)];
      var[static_cast<size_t>(ch)] = running_var[static_cast<size_t>(ch)];
    }
  }

  for (int64_t ch = 0; ch < c; ++ch) {
    const S inv = static_cast<S>(1.0 / std::sqrt(static_cast<double>(var[static_cast<size_t>(ch)]) + eps));
    const S g = gamma.data()[ch] * inv;
    const S b = beta.data()[ch] - mean[static_cast<size_t>(ch)] * g;
    for (int64_t i = 0; i < n; ++i) {
      const S* p = x.data() + (i * c + ch) * hw;
      S* q = out.data() + (i * c + ch) * hw;
      for (int64_t j = 0; j < hw; ++j) q[j] = p[j] * g + b;
    }
  }
  detail::finite_check(out, "batchnorm");

  if (detail::recording<S>(req)) {
    auto xd = x, gd = gamma, bd = beta, od = out;
    GraphT<S>::active()->push([xd, gd, bd, od, mean, var, training, eps]() mutable {
      const Shape& xs2 = xd.shape();
      const int64_t n2 = xs2[0], c2 = xs2[1], hw2 = xs2[2] * xs2[3];
      const int64_t cnt2 = n2 * hw2;
      const std::vector<S>& go = od.grad_buffer();
      for (int64_t ch = 0; ch < c2; ++ch) {
        const double mu = static_cast<double>(mean[static_cast<size_t>(ch)]);
        const double inv = 1.0 / std::sqrt(static_cast<double>(var[static_cast<size_t>(ch)]) + eps);
        const double gam = static_cast<double>(gd.data()[ch]);
        double sum_gy = 0, sum_gy_xhat = 0;
        for (int64_t i = 0; i < n2; ++i) {
          const S* px = xd.data() + (i * c2 + ch) * hw2;
          const S* pg = go.data() + (i * c2 + ch) * hw2;
          for (int64_t j = 0; j < hw2; ++j) {
            double xh = (static_cast<double>(px[j]) - mu) * inv;
            sum_gy += static_cast<double>(pg[j]);
            sum_gy_xhat += static_cast<double>(pg[j]) * xh;
          }
        }
        if (gd.requires_grad()) gd.grad_buffer()[static_cast<size_t>(ch)] += static_cast<S>(sum_gy_xhat);
        if (bd.requires_grad()) bd.grad_buffer()[static_cast<size_t>(ch)] += static_cast<S>(sum_gy);
        if (xd.requires_grad()) {
          auto& gx = xd.grad_buffer();
          if (training) {
            const double k1 = gam * inv;
            for (int64_t i = 0; i < n2; ++i) {
              const S* px = xd.data() + (i * c2 + ch) * hw2;
              const S* pg = go.data() + (i * c2 + ch) * hw2;
              S* pq = gx.data() + (i * c2 + ch) * hw2;
              for (int64_t j = 0; j < hw2; ++j) {
                double xh = (static_cast<double>(px[j]) - mu) * inv;
                double d = k1 * (static_cast<double>(pg[j]) - sum_gy / cnt2 - xh * sum_gy_xhat / cnt2);
                pq[j] += static_cast<S>(d);
              }
            }
          } else {
            const double k1 = gam * inv;
            for (int64_t i = 0; i < n2; ++i) {
              const S* pg = go.data() + (i * c2 + ch) * hw2;
              S* pq = gx.data() + (i * c2 + ch) * hw2;
              for (int64_t j = 0; j < hw2; ++j) pq[j] += static_cast<S>(k1 * static_cast<double>(pg[j]));
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------
template <std::floating_point S>
TensorT<S> maxpool2d(const TensorT<S>& x, int64_t k, int64_t stride, int64_t pad) {
  const Shape& xs = x.shape();
  if (xs.rank() != 4) throw ConfigError("maxpool2d: expects 4-d input");
  const int64_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const int64_t oh = detail::conv_out_dim(h, k, stride, pad);
  const int64_t ow = detail::conv_out_dim(w, k, stride, pad);
  if (oh < 1 || ow < 1) throw ConfigError("maxpool2d: empty output");

  bool req = x.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(Shape{n, c, oh, ow}, req);
  std::vector<int64_t> argmax(static_cast<size_t>(out.numel()));
  int64_t oi = 0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const S* img = x.data() + (i * c + ch) * h * w;
      for (int64_t r = 0; r < oh; ++r)
        for (int64_t q = 0; q < ow; ++q, ++oi) {
          S best = std::numeric_limits<S>::lowest();
          int64_t best_idx = -1;
          for (int64_t ki = 0; ki < k; ++ki) {
            const int64_t ih = r * stride - pad + ki;
            if (ih < 0 || ih >= h) continue;
            for (int64_t kj = 0; kj < k; ++kj) {
              const int64_t iw = q * stride - pad + kj;
              if (iw < 0 || iw >= w) continue;
              const S v = img[ih * w + iw];
              if (v > best) {
                best = v;
                best_idx = (i * c + ch) * h * w + ih * w + iw;
              }
            }
          }
          if (best_idx < 0) {  // window entirely in padding
            best = S(0);
          }
          out.data()[oi] = best;
          argmax[static_cast<size_t>(oi)] = best_idx;
        }
    }
  detail::finite_check(out, "maxpool2d");

  if (detail::recording<S>(req)) {
    auto xd = x, od = out;
    GraphT<S>::active()->push([xd, od, argmax = std::move(argmax)]() mutable {
      auto& gx = xd.grad_buffer();
      const std::vector<S>& go = od.grad_buffer();
      for (size_t i = 0; i < argmax.size(); ++i)
        if (argmax[i] >= 0) gx[static_cast<size_t>(argmax[i])] += go[i];
    });
  }
  return out;
}

// non-overlapping average pool, kernel == stride == k
template <std::floating_point S>
TensorT<S> avgpool2d(const TensorT<S>& x, int64_t k) {
  const Shape& xs = x.shape();
  if (xs.rank() != 4) throw ConfigError("avgpool2d: expects 4-d input");
  if (k == 1) return x;
  const int64_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  if (h % k != 0 || w % k != 0)
    throw ConfigError("avgpool2d: spatial extent not divisible by factor");
  const int64_t oh = h / k, ow = w / k;
  bool req = x.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(Shape{n, c, oh, ow}, req);
  const S inv = S(1) / static_cast<S>(k * k);
  for (int64_t i = 0; i < n * c; ++i) {
    const S* img = x.data() + i * h * w;
    S* dst = out.data() + i * oh * ow;
    for (int64_t r = 0; r < oh; ++r)
      for (int64_t q = 0; q < ow; ++q) {
        S acc = 0;
        for (int64_t ki = 0; ki < k; ++ki)
          for (int64_t kj = 0; kj < k; ++kj) acc += img[(r * k + ki) * w + q * k + kj];
        dst[r * ow + q] = acc * inv;
      }
  }
  detail::finite_check(out, "avgpool2d");
  if (detail::recording<S>(req)) {
    auto xd = x, od = out;
    GraphT<S>::active()->push([xd, od, k]() mutable {
      const Shape& xs2 = xd.shape();
      const int64_t n2 = xs2[0] * xs2[1], h2 = xs2[2], w2 = xs2[3];
      const int64_t oh2 = h2 / k, ow2 = w2 / k;
      const S inv2 = S(1) / static_cast<S>(k * k);
      auto& gx = xd.grad_buffer();
      const std::vector<S>& go = od.grad_buffer();
      for (int64_t i = 0; i < n2; ++i)
        for (int64_t r = 0; r < oh2; ++r)
          for (int64_t q = 0; q < ow2; ++q) {
            const S g = go[static_cast<size_t>((i * oh2 + r) * ow2 + q)] * inv2;
            for (int64_t ki = 0; ki < k; ++ki)
              for (int64_t kj = 0; kj < k; ++kj)
                gx[static_cast<size_t>(i * h2 * w2 + (r * k + ki) * w2 + q * k + kj)] += g;
          }
    });
  }
  return out;
}

template <std::floating_point S>
TensorT<S> global_avg_pool(const TensorT<S>& x) {
  const Shape& xs = x.shape();
  if (xs.rank() != 4) throw ConfigError("global_avg_pool: expects 4-d input");
  const int64_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  bool req = x.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(Shape{n, c}, req);
  for (int64_t i = 0; i < n * c; ++i) {
    const S* p = x.data() + i * hw;
    double acc = 0;
    for (int64_t j = 0; j < hw; ++j) acc += static_cast<double>(p[j]);
    out.data()[i] = static_cast<S>(acc / static_cast<double>(hw));
  }
  detail::finite_check(out, "global_avg_pool");
  if (detail::recording<S>(req)) {
    auto xd = x, od = out;
    GraphT<S>::active()->push([xd, od]() mutable {
      const int64_t hw2 = xd.shape()[2] * xd.shape()[3];
      const S inv = S(1) / static_cast<S>(hw2);
      auto& gx = xd.grad_buffer();
      const std::vector<S>& go = od.grad_buffer();
      for (int64_t i = 0; i < od.numel(); ++i) {
        const S g = go[static_cast<size_t>(i)] * inv;
        S* p = gx.data() + i * hw2;
        for (int64_t j = 0; j < hw2; ++j) p[j] += g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear: [N,in] x [out,in]^T + b -> [N,out]
// ---------------------------------------------------------------------------
template <std::floating_point S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const std::optional<TensorT<S>>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.rank() != 2 || ws.rank() != 2) throw ConfigError("linear: expects 2-d input and weight");
  if (xs[1] != ws[1]) throw ConfigError("linear: feature dims disagree");
  const int64_t n = xs[0], in = xs[1], out_f = ws[0];
  if (bias && bias->numel() != out_f) throw ConfigError("linear: bias shape mismatch");
  bool req = x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad());
  TensorT<S> out = detail::alloc_out<S>(Shape{n, out_f}, req);
  gemm<S>(false, true, static_cast<int>(n), static_cast<int>(out_f), static_cast<int>(in), S(1),
          x.data(), static_cast<int>(in), w.data(), static_cast<int>(in), S(0), out.data(),
          static_cast<int>(out_f));
  if (bias)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < out_f; ++j) out.data()[i * out_f + j] += bias->data()[j];
  detail::finite_check(out, "linear");

  if (detail::recording<S>(req)) {
    auto xd = x, wd = w, od = out;
    std::optional<TensorT<S>> bd = bias;
    GraphT<S>::active()->push([xd, wd, bd, od]() mutable {
      const int64_t n2 = xd.shape()[0], in2 = xd.shape()[1], of2 = wd.shape()[0];
      const std::vector<S>& go = od.grad_buffer();
      if (bd && bd->requires_grad()) {
        auto& gb = bd->grad_buffer();
        for (int64_t j = 0; j < of2; ++j) {
          double acc = 0;
          for (int64_t i = 0; i < n2; ++i) acc += static_cast<double>(go[static_cast<size_t>(i * of2 + j)]);
          gb[static_cast<size_t>(j)] += static_cast<S>(acc);
        }
      }
      if (wd.requires_grad())
        gemm<S>(true, false, static_cast<int>(of2), static_cast<int>(in2), static_cast<int>(n2),
                S(1), go.data(), static_cast<int>(of2), xd.data(), static_cast<int>(in2), S(1),
                wd.grad_buffer().data(), static_cast<int>(in2));
      if (xd.requires_grad())
        gemm<S>(false, false, static_cast<int>(n2), static_cast<int>(in2), static_cast<int>(of2),
                S(1), go.data(), static_cast<int>(of2), wd.data(), static_cast<int>(in2), S(1),
                xd.grad_buffer().data(), static_cast<int>(in2));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------
namespace detail {
template <std::floating_point S, class Fwd, class Bwd>
TensorT<S> binary_op(const TensorT<S>& a, const TensorT<S>& b, const char* name, Fwd fwd, Bwd bwd) {
  if (a.shape() != b.shape())
    throw UsageError(std::string(name) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  bool req = a.requires_grad() || b.requires_grad();
  TensorT<S> out = alloc_out<S>(a.shape(), req);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = fwd(a.data()[i], b.data()[i]);
  finite_check(out, name);
  if (recording<S>(req)) {
    auto ad = a, bd = b, od = out;
    GraphT<S>::active()->push([ad, bd, od, bwd]() mutable {
      const std::vector<S>& go = od.grad_buffer();
      const int64_t n2 = od.numel();
      for (int64_t i = 0; i < n2; ++i) {
        auto [ga, gb] = bwd(ad.data()[i], bd.data()[i], go[static_cast<size_t>(i)]);
        if (ad.requires_grad()) ad.grad_buffer()[static_cast<size_t>(i)] += ga;
        if (bd.requires_grad()) bd.grad_buffer()[static_cast<size_t>(i)] += gb;
      }
    });
  }
  return out;
}
}  // namespace detail

template <std::floating_point S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op<S>(
      a, b, "add", [](S x, S y) { return x + y; },
      [](S, S, S g) { return std::pair<S, S>{g, g}; });
}

template <std::floating_point S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op<S>(
      a, b, "sub", [](S x, S y) { return x - y; },
      [](S, S, S g) { return std::pair<S, S>{g, -g}; });
}

template <std::floating_point S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op<S>(
      a, b, "mul", [](S x, S y) { return x * y; },
      [](S x, S y, S g) { return std::pair<S, S>{g * y, g * x}; });
}

template <std::floating_point S>
TensorT<S> scale(const TensorT<S>& x, S c) {
  bool req = x.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(x.shape(), req);
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * c;
  detail::finite_check(out, "scale");
  if (detail::recording<S>(req)) {
    auto xd = x, od = out;
    GraphT<S>::active()->push([xd, od, c]() mutable {
      auto& gx = xd.grad_buffer();
      const std::vector<S>& go = od.grad_buffer();
      for (int64_t i = 0; i < od.numel(); ++i) gx[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * c;
    });
  }
  return out;
}

template <std::floating_point S>
TensorT<S> sum(const TensorT<S>& x) {
  bool req = x.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(Shape{1}, req);
  double acc = 0;
  for (S v : x.values()) acc += static_cast<double>(v);
  out.data()[0] = static_cast<S>(acc);
  detail::finite_check(out, "sum");
  if (detail::recording<S>(req)) {
    auto xd = x, od = out;
    GraphT<S>::active()->push([xd, od]() mutable {
      const S g = od.grad_buffer()[0];
      auto& gx = xd.grad_buffer();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// time-major helpers for packed [T*N, ...] buffers
// ---------------------------------------------------------------------------

// out[t] = x[t-1] along the leading time axis, zeros at t=0
template <std::floating_point S>
TensorT<S> time_shift(const TensorT<S>& x, int64_t t_steps) {
  if (t_steps < 1 || x.shape()[0] % t_steps != 0)
    throw UsageError("time_shift: leading extent not divisible by T");
  const int64_t per = x.numel() / t_steps;
  bool req = x.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(x.shape(), req);
  std::memset(out.data(), 0, sizeof(S) * static_cast<size_t>(per));
  std::memcpy(out.data() + per, x.data(), sizeof(S) * static_cast<size_t>((t_steps - 1) * per));
  if (detail::recording<S>(req)) {
    auto xd = x, od = out;
    GraphT<S>::active()->push([xd, od, t_steps, per]() mutable {
      auto& gx = xd.grad_buffer();
      const std::vector<S>& go = od.grad_buffer();
      for (int64_t i = 0; i < (t_steps - 1) * per; ++i) gx[static_cast<size_t>(i)] += go[static_cast<size_t>(i + per)];
    });
  }
  return out;
}

// mean over the leading time axis of a packed [T*N, C] tensor -> [N, C].
// Accumulates in double with a fixed t-ascending order.
template <std::floating_point S>
TensorT<S> mean_over_time(const TensorT<S>& x, int64_t t_steps) {
  if (x.shape().rank() != 2 || x.shape()[0] % t_steps != 0)
    throw UsageError("mean_over_time: expects [T*N, C]");
  const int64_t n = x.shape()[0] / t_steps, c = x.shape()[1];
  bool req = x.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(Shape{n, c}, req);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j) {
      double acc = 0;
      for (int64_t t = 0; t < t_steps; ++t)
        acc += static_cast<double>(x.data()[(t * n + i) * c + j]);
      out.data()[i * c + j] = static_cast<S>(acc / static_cast<double>(t_steps));
    }
  detail::finite_check(out, "mean_over_time");
  if (detail::recording<S>(req)) {
    auto xd = x, od = out;
    GraphT<S>::active()->push([xd, od, t_steps, n, c]() mutable {
      auto& gx = xd.grad_buffer();
      const std::vector<S>& go = od.grad_buffer();
      const S inv = S(1) / static_cast<S>(t_steps);
      for (int64_t t = 0; t < t_steps; ++t)
        for (int64_t i = 0; i < n * c; ++i)
          gx[static_cast<size_t>(t * n * c + i)] += go[static_cast<size_t>(i)] * inv;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// channel scaling (parameter-free): group-average reduce and block-tile restore
// ---------------------------------------------------------------------------
template <std::floating_point S>
TensorT<S> channel_group_mean(const TensorT<S>& x, int64_t r) {
  const Shape& xs = x.shape();
  if (xs.rank() != 4) throw ConfigError("channel_group_mean: expects 4-d input");
  if (r == 1) return x;
  if (xs[1] % r != 0) throw ConfigError("channel_group_mean: channels not divisible by r");
  const int64_t n = xs[0], c = xs[1], hw = xs[2] * xs[3], cg = c / r;
  bool req = x.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(Shape{n, cg, xs[2], xs[3]}, req);
  const S inv = S(1) / static_cast<S>(r);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t g = 0; g < cg; ++g) {
      S* dst = out.data() + (i * cg + g) * hw;
      std::memset(dst, 0, sizeof(S) * static_cast<size_t>(hw));
      for (int64_t j = 0; j < r; ++j) {
        const S* src = x.data() + (i * c + g * r + j) * hw;
        for (int64_t p = 0; p < hw; ++p) dst[p] += src[p];
      }
      for (int64_t p = 0; p < hw; ++p) dst[p] *= inv;
    }
  detail::finite_check(out, "channel_group_mean");
  if (detail::recording<S>(req)) {
    auto xd = x, od = out;
    GraphT<S>::active()->push([xd, od, r]() mutable {
      const Shape& xs2 = xd.shape();
      const int64_t n2 = xs2[0], c2 = xs2[1], hw2 = xs2[2] * xs2[3], cg2 = c2 / r;
      const S inv2 = S(1) / static_cast<S>(r);
      auto& gx = xd.grad_buffer();
      const std::vector<S>& go = od.grad_buffer();
      for (int64_t i = 0; i < n2; ++i)
        for (int64_t g = 0; g < cg2; ++g) {
          const S* src = go.data() + (i * cg2 + g) * hw2;
          for (int64_t j = 0; j < r; ++j) {
            S* dst = gx.data() + (i * c2 + g * r + j) * hw2;
            for (int64_t p = 0; p < hw2; ++p) dst[p] += src[p] * inv2;
          }
        }
    });
  }
  return out;
}

template <std::floating_point S>
TensorT<S> channel_tile(const TensorT<S>& x, int64_t r) {
  const Shape& xs = x.shape();
  if (xs.rank() != 4) throw ConfigError("channel_tile: expects 4-d input");
  if (r == 1) return x;
  const int64_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  bool req = x.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(Shape{n, c * r, xs[2], xs[3]}, req);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < r; ++j)
      std::memcpy(out.data() + (i * c * r + j * c) * hw, x.data() + i * c * hw,
                  sizeof(S) * static_cast<size_t>(c * hw));
  if (detail::recording<S>(req)) {
    auto xd = x, od = out;
    GraphT<S>::active()->push([xd, od, r]() mutable {
      const Shape& xs2 = xd.shape();
      const int64_t n2 = xs2[0], c2 = xs2[1], hw2 = xs2[2] * xs2[3];
      auto& gx = xd.grad_buffer();
      const std::vector<S>& go = od.grad_buffer();
      for (int64_t i = 0; i < n2; ++i)
        for (int64_t j = 0; j < r; ++j) {
          const S* src = go.data() + (i * c2 * r + j * c2) * hw2;
          S* dst = gx.data() + i * c2 * hw2;
          for (int64_t p = 0; p < c2 * hw2; ++p) dst[p] += src[p];
        }
    });
  }
  return out;
}

template <std::floating_point S>
TensorT<S> upsample_nearest(const TensorT<S>& x, int64_t s) {
  const Shape& xs = x.shape();
  if (xs.rank() != 4) throw ConfigError("upsample_nearest: expects 4-d input");
  if (s == 1) return x;
  const int64_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  bool req = x.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(Shape{n, c, h * s, w * s}, req);
  for (int64_t i = 0; i < n * c; ++i) {
    const S* img = x.data() + i * h * w;
    S* dst = out.data() + i * h * s * w * s;
    for (int64_t r = 0; r < h * s; ++r) {
      const S* srow = img + (r / s) * w;
      S* drow = dst + r * w * s;
      for (int64_t q = 0; q < w * s; ++q) drow[q] = srow[q / s];
    }
  }
  if (detail::recording<S>(req)) {
    auto xd = x, od = out;
    GraphT<S>::active()->push([xd, od, s]() mutable {
      const Shape& xs2 = xd.shape();
      const int64_t n2 = xs2[0] * xs2[1], h2 = xs2[2], w2 = xs2[3];
      auto& gx = xd.grad_buffer();
      const std::vector<S>& go = od.grad_buffer();
      for (int64_t i = 0; i < n2; ++i) {
        const S* src = go.data() + i * h2 * s * w2 * s;
        S* dst = gx.data() + i * h2 * w2;
        for (int64_t r = 0; r < h2 * s; ++r)
          for (int64_t q = 0; q < w2 * s; ++q) dst[(r / s) * w2 + q / s] += src[r * w2 * s + q];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------
template <std::floating_point S>
TensorT<S> softmax_cross_entropy(const TensorT<S>& logits, const std::vector<int>& labels) {
  const Shape& xs = logits.shape();
  if (xs.rank() != 2) throw ConfigError("softmax_cross_entropy: expects [N,C] logits");
  const int64_t n = xs[0], c = xs[1];
  if (static_cast<int64_t>(labels.size()) != n)
    throw ConfigError("softmax_cross_entropy: label count mismatch");
  for (int lbl : labels)
    if (lbl < 0 || lbl >= c) throw ConfigError("softmax_cross_entropy: label out of range");

  bool req = logits.requires_grad();
  TensorT<S> out = detail::alloc_out<S>(Shape{1}, req);
  std::vector<S> probs(static_cast<size_t>(n * c));
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    const S* row = logits.data() + i * c;
    S mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (int64_t j = 0; j < c; ++j)
      probs[static_cast<size_t>(i * c + j)] =
          static_cast<S>(std::exp(static_cast<double>(row[j] - mx)) / z);
    loss -= static_cast<double>(row[labels[static_cast<size_t>(i)]] - mx) - std::log(z);
  }
  out.data()[0] = static_cast<S>(loss / static_cast<double>(n));
  detail::finite_check(out, "softmax_cross_entropy");
  if (detail::recording<S>(req)) {
    auto xd = logits, od = out;
    GraphT<S>::active()->push([xd, od, probs = std::move(probs), labels]() mutable {
      const int64_t n2 = xd.shape()[0], c2 = xd.shape()[1];
      const S g = od.grad_buffer()[0] / static_cast<S>(n2);
      auto& gx = xd.grad_buffer();
      for (int64_t i = 0; i < n2; ++i)
        for (int64_t j = 0; j < c2; ++j) {
          S p = probs[static_cast<size_t>(i * c2 + j)];
          if (j == labels[static_cast<size_t>(i)]) p -= S(1);
          gx[static_cast<size_t>(i * c2 + j)] += g * p;
        }
    });
  }
  return out;
}

// plain softmax rows, no autodiff (inference scoring)
template <std::floating_point S>
std::vector<double> softmax_rows(const TensorT<S>& logits) {
  const int64_t n = logits.shape()[0], c = logits.shape()[1];
  std::vector<double> out(static_cast<size_t>(n * c));
  for (int64_t i = 0; i < n; ++i) {
    const S* row = logits.data() + i * c;
    S mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (int64_t j = 0; j < c; ++j)
      out[static_cast<size_t>(i * c + j)] = std::exp(static_cast<double>(row[j] - mx)) / z;
  }
  return out;
}

}  // namespace stsep

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stsep/ops.hpp"

namespace stsep {

template <std::floating_point S>
struct ParamRef {
  std::string name;
  TensorT<S>* tensor;
};

template <std::floating_point S>
struct BufferRef {
  std::string name;
  std::vector<S>* values;
};

template <std::floating_point S>
TensorT<S> kaiming_uniform(Shape shape, int64_t fan_in, Rng& rng) {
  TensorT<S> t(shape);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<S>(rng.uniform(-bound, bound));
  t.set_requires_grad(true);
  return t;
}

template <std::floating_point S>
class Conv2dT {
 public:
  Conv2dT() = default;
  Conv2dT(int64_t cin, int64_t cout, int64_t k, int64_t stride, int64_t pad, bool with_bias,
          Rng& rng)
      : stride_(stride), pad_(pad) {
    weight_ = kaiming_uniform<S>(Shape{cout, cin, k, k}, cin * k * k, rng);
    if (with_bias) {
      bias_ = TensorT<S>(Shape{cout});
      bias_->set_requires_grad(true);
    }
  }

  TensorT<S> forward(const TensorT<S>& x) const { return conv2d(x, weight_, bias_, stride_, pad_); }

  TensorT<S>& weight() { return weight_; }
  const TensorT<S>& weight() const { return weight_; }
  int64_t stride() const { return stride_; }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".weight", &weight_});
    if (bias_) out.push_back({prefix + ".bias", &*bias_});
  }

 private:
  TensorT<S> weight_;
  std::optional<TensorT<S>> bias_;
  int64_t stride_ = 1;
  int64_t pad_ = 0;
};

template <std::floating_point S>
class BatchNorm2dT {
 public:
  BatchNorm2dT() = default;
  explicit BatchNorm2dT(int64_t channels, double momentum = 0.1, double eps = 1e-5)
      : momentum_(momentum), eps_(eps) {
    gamma_ = TensorT<S>(Shape{channels}, S(1), true);
    beta_ = TensorT<S>(Shape{channels}, S(0), true);
    running_mean_.assign(static_cast<size_t>(channels), S(0));
    running_var_.assign(static_cast<size_t>(channels), S(1));
  }

  TensorT<S> forward(const TensorT<S>& x, bool training) {
    return batchnorm(x, gamma_, beta_, running_mean_, running_var_, training, momentum_, eps_);
  }

  TensorT<S>& gamma() { return gamma_; }
  TensorT<S>& beta() { return beta_; }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".gamma", &gamma_});
    out.push_back({prefix + ".beta", &beta_});
  }
  void collect_buffers(const std::string& prefix, std::vector<BufferRef<S>>& out) {
    out.push_back({prefix + ".running_mean", &running_mean_});
    out.push_back({prefix + ".running_var", &running_var_});
  }

 private:
  TensorT<S> gamma_, beta_;
  std::vector<S> running_mean_, running_var_;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
};

template <std::floating_point S>
class LinearT {
 public:
  LinearT() = default;
  LinearT(int64_t in, int64_t out, Rng& rng) {
    weight_ = kaiming_uniform<S>(Shape{out, in}, in, rng);
    bias_ = TensorT<S>(Shape{out}, S(0), true);
  }

  TensorT<S> forward(const TensorT<S>& x) const { return linear(x, weight_, std::optional<TensorT<S>>(bias_)); }

  TensorT<S>& weight() { return weight_; }
  TensorT<S>& bias() { return bias_; }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".weight", &weight_});
    out.push_back({prefix + ".bias", &bias_});
  }

 private:
  TensorT<S> weight_, bias_;
};

}  // namespace stsep

#pragma once

#include <cmath>
#include <concepts>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "stsep/common.hpp"

namespace stsep {

template <std::floating_point S>
class GraphT;

// Dense tensor with optional reverse-mode gradient. Value semantics: copies
// share the underlying buffer (shared_ptr), ops never mutate inputs in place.
// The scalar type is a template parameter so tests can shadow-evaluate the
// same computations in double; the product instantiation is float.
template <std::floating_point S>
class TensorT {
 public:
  struct Data {
    Shape shape;
    std::vector<S> values;
    std::vector<S> grad;  // allocated on first accumulation
    bool requires_grad = false;
    const void* tape = nullptr;  // graph that recorded the producing op
  };

  TensorT() = default;
  explicit TensorT(Shape shape, S fill = S(0), bool requires_grad = false)
      : d_(std::make_shared<Data>()) {
    d_->shape = shape;
    d_->values.assign(static_cast<size_t>(shape.numel()), fill);
    d_->requires_grad = requires_grad;
  }
  static TensorT zeros(Shape shape) { return TensorT(shape); }
  static TensorT from(Shape shape, std::vector<S> values, bool requires_grad = false) {
    if (static_cast<int64_t>(values.size()) != shape.numel())
      throw UsageError("TensorT::from: data length " + std::to_string(values.size()) +
                       " does not match shape " + shape.str());
    TensorT t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = shape;
    t.d_->values = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int64_t numel() const { return d_->shape.numel(); }
  bool requires_grad() const { return d_ && d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }

  const S* data() const { return d_->values.data(); }
  S* data() { return d_->values.data(); }
  const std::vector<S>& values() const { return d_->values; }
  std::vector<S>& values() { return d_->values; }
  S item() const {
    if (numel() != 1) throw UsageError("TensorT::item: tensor is not scalar");
    return d_->values[0];
  }

  bool has_grad() const { return d_ && !d_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (!has_grad()) throw UsageError("TensorT::grad: no gradient accumulated");
    return d_->grad;
  }
  std::vector<S>& grad_buffer() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), S(0));
    return d_->grad;
  }
  void zero_grad() { d_->grad.clear(); }

  // Deep copy of values; grad/recording state is not carried over.
  TensorT clone() const {
    TensorT t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = d_->shape;
    t.d_->values = d_->values;
    t.d_->requires_grad = d_->requires_grad;
    return t;
  }

  bool same_buffer(const TensorT& o) const { return d_ == o.d_; }

  typename std::shared_ptr<Data> ptr() const { return d_; }

 private:
  std::shared_ptr<Data> d_;
  friend class GraphT<S>;
};

// Tape for one forward pass: ops append nodes in execution order, backward
// replays them once in reverse. A tensor consumed by several nodes receives
// the sum of incoming gradients because every node accumulates with +=.
template <std::floating_point S>
class GraphT {
 public:
  GraphT() = default;
  GraphT(const GraphT&) = delete;
  GraphT& operator=(const GraphT&) = delete;
  ~GraphT() {
    if (active_ == this) active_ = nullptr;
  }

  // RAII recording scope; nesting restores the previous tape.
  class Record {
   public:
    explicit Record(GraphT& g) : prev_(active_) { active_ = &g; }
    ~Record() { active_ = prev_; }
    Record(const Record&) = delete;
    Record& operator=(const Record&) = delete;

   private:
    GraphT* prev_;
  };

  static GraphT* active() { return active_; }

  void push(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }
  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void run_backward(TensorT<S>& loss) {
    if (consumed_) throw UsageError("backward: graph already consumed");
    if (loss.numel() != 1) throw UsageError("backward: loss must be scalar");
    if (loss.ptr()->tape != this)
      throw UsageError("backward: loss was not recorded on this graph");
    loss.grad_buffer()[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    consumed_ = true;
    nodes_.clear();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  static thread_local GraphT* active_;
};

template <std::floating_point S>
thread_local GraphT<S>* GraphT<S>::active_ = nullptr;

template <std::floating_point S>
void backward(GraphT<S>& graph, TensorT<S>& loss) {
  graph.run_backward(loss);
}

using Tensor = TensorT<float>;
using Graph = GraphT<float>;

}  // namespace stsep

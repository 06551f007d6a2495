#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "darcot/common.hpp"

namespace darcot {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

template <class S>
struct TensorImpl {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // allocated on first accumulation
  bool requires_grad = false;

  void accumulate(std::span<const S> g) {
    if (grad.empty()) grad.assign(data.size(), S(0));
    for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
  std::vector<S>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), S(0));
    return grad;
  }
};

}  // namespace detail

template <class S>
class Tape;

// Dense row-major tensor with optional participation in reverse-mode
// autodiff. Copying a Tensor copies the handle, not the storage.
template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() : p_(std::make_shared<detail::TensorImpl<S>>()) {}

  static Tensor zeros(Shape shape) {
    Tensor t;
    int64_t n = shape_numel(shape);
    t.p_->shape = std::move(shape);
    t.p_->data.assign(size_t(n), S(0));
    return t;
  }

  static Tensor full(Shape shape, S value) {
    Tensor t = zeros(std::move(shape));
    for (S& x : t.p_->data) x = value;
    return t;
  }

  static Tensor scalar(S value) {
    Tensor t;
    t.p_->shape = {};
    t.p_->data.assign(1, value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<S> values) {
    DARCOT_REQUIRE(shape_numel(shape) == int64_t(values.size()),
                   "tensor: shape ", shape_str(shape), " does not match ",
                   values.size(), " values");
    Tensor t;
    t.p_->shape = std::move(shape);
    t.p_->data = std::move(values);
    return t;
  }

  const Shape& shape() const { return p_->shape; }
  int rank() const { return int(p_->shape.size()); }
  int64_t dim(int i) const { return p_->shape[size_t(i)]; }
  int64_t numel() const { return int64_t(p_->data.size()); }
  bool is_scalar() const { return p_->shape.empty(); }
  bool defined() const { return !p_->data.empty() || !p_->shape.empty(); }

  std::span<const S> data() const { return {p_->data.data(), p_->data.size()}; }
  std::span<S> mut_data() { return {p_->data.data(), p_->data.size()}; }

  bool requires_grad() const { return p_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    p_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return !p_->grad.empty(); }
  // Gradient of the last backward pass; zeros if this tensor was unreachable.
  std::vector<S> grad() const {
    if (p_->grad.empty()) return std::vector<S>(p_->data.size(), S(0));
    return p_->grad;
  }
  void zero_grad() { p_->grad.clear(); }

  S item() const {
    DARCOT_REQUIRE(numel() == 1, "item: tensor has ", numel(), " elements");
    return p_->data[0];
  }

  // Detached copy: same values, no grad participation.
  Tensor detach() const {
    Tensor t;
    t.p_->shape = p_->shape;
    t.p_->data = p_->data;
    return t;
  }

  Tensor clone() const {
    Tensor t = detach();
    t.p_->requires_grad = p_->requires_grad;
    return t;
  }

  bool same_impl(const Tensor& other) const { return p_ == other.p_; }

  std::shared_ptr<detail::TensorImpl<S>> impl() const { return p_; }

 private:
  std::shared_ptr<detail::TensorImpl<S>> p_;

  friend class Tape<S>;
};

// Ordered record of executed ops. Constructing a Tape makes it the active
// tape for the current thread (stack discipline); ops whose inputs require
// grad record a backward rule onto it. One Tape supports one backward pass.
//
// Tapes and their tensors are confined to one logical thread; distinct
// threads may each run their own tape concurrently.
template <class S>
class Tape {
 public:
  Tape() : prev_(active_ptr()) { active_ptr() = this; }
  ~Tape() { active_ptr() = prev_; }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_ptr(); }

  // Records one executed op. `inputs` must precede the node that consumes
  // them, which holds by construction since ops record at execution time.
  void record(std::function<void()> backward_rule) {
    nodes_.push_back(std::move(backward_rule));
  }

  size_t size() const { return nodes_.size(); }

  // Reverse-mode sweep from `loss`. Visits every recorded op exactly once,
  // in reverse execution order (a valid topological order). Leaves that are
  // not reachable from `loss` keep zero gradients.
  void backward(const Tensor<S>& loss) {
    DARCOT_REQUIRE(loss.is_scalar(), "backward: loss must be a scalar, got shape ",
                   shape_str(loss.shape()));
    DARCOT_REQUIRE(!consumed_, "backward: tape already consumed; reset() before reuse");
    consumed_ = true;
    loss.impl()->accumulate(std::vector<S>{S(1)});
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  // RAII guard that deactivates any tape on this thread. Ops executed while
  // a Suspend is alive are not recorded (values only, no grad).
  class Suspend {
   public:
    Suspend() : saved_(active_ptr()) { active_ptr() = nullptr; }
    ~Suspend() { active_ptr() = saved_; }
    Suspend(const Suspend&) = delete;
    Suspend& operator=(const Suspend&) = delete;

   private:
    Tape* saved_;
  };

 private:
  static Tape*& active_ptr() {
    thread_local Tape* active = nullptr;
    return active;
  }

  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// Runs `fn` with no active tape, so ops inside are not recorded even if
// inputs require grad (used e.g. for the potential update's frozen T(y)).
template <class S, class Fn>
auto no_grad(Fn&& fn) {
  typename Tape<S>::Suspend guard;
  return fn();
}

}  // namespace darcot

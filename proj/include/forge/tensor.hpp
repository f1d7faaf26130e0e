#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle: copying a Tensor aliases the same storage.
// Use clone() for a deep copy. Operations record a backward rule on the
// thread's active Tape only when a tape is active and at least one input
// requires a gradient; without an active tape every op is a plain forward
// computation (inference mode).

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace forge {

using Shape = std::vector<std::size_t>;

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <class T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;

  T* ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

template <class T>
class Tape;

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorStorage<T>>()) {
    if (numel_of(shape) != data.size()) {
      throw DimensionError("tensor shape " + to_string(shape) + " holds " +
                           std::to_string(numel_of(shape)) +
                           " values but data has " +
                           std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient values, or zeros when no gradient has been accumulated.
  std::vector<T> grad_or_zeros() const {
    return has_grad() ? impl_->grad : std::vector<T>(numel(), T(0));
  }
  void zero_grad() {
    if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  bool requires_grad() const { return impl_->requires_grad; }
  /// Disabling gradients releases any existing grad buffer.
  void set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (!on) std::vector<T>().swap(impl_->grad);
  }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on non-scalar tensor " + to_string(shape()));
    }
    return impl_->data[0];
  }

  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }
  T at(std::size_t r, std::size_t c) const {
    return impl_->data[r * impl_->shape.back() + c];
  }

  /// Deep copy of the values; the copy has no grad buffer and no tape link.
  Tensor clone() const {
    return Tensor(impl_->shape, impl_->data, impl_->requires_grad);
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<TensorStorage<T>>& storage() const { return impl_; }

 private:
  std::shared_ptr<TensorStorage<T>> impl_;
};

/// Records backward rules in creation order. One backward pass per recording.
template <class T>
class Tape {
 public:
  Tape() : previous_(active_) { active_ = this; }
  ~Tape() { active_ = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::function<void()> rule) { nodes_.push_back(std::move(rule)); }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Seeds d(loss)/d(loss) = 1 and runs the recorded rules in reverse.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          to_string(loss.shape()));
    }
    if (consumed_) {
      throw ContractError("backward() already ran on this tape; record a new "
                          "forward pass first");
    }
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.storage()->ensure_grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

 private:
  inline static thread_local Tape* active_ = nullptr;
  Tape* previous_;
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

/// Runs backward on the thread's active tape.
template <class T>
void backward(const Tensor<T>& loss) {
  auto* tape = Tape<T>::active();
  if (tape == nullptr) throw ContractError("backward() without an active tape");
  tape->backward(loss);
}

namespace detail {

template <class T>
bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

/// Marks `out` as differentiable and records `rule` if any input needs it.
/// The rule runs only when `out` received a gradient.
template <class T, class Rule>
void record(std::initializer_list<const Tensor<T>*> inputs, Tensor<T>& out,
            Rule&& rule) {
  if (!needs_grad<T>(inputs)) return;
  out.storage()->requires_grad = true;
  Tape<T>::active()->record(
      [o = out.storage(), r = std::forward<Rule>(rule)]() mutable {
        if (o->grad.empty()) return;
        r(o->grad);
      });
}

template <class T>
T* grad_target(const std::shared_ptr<TensorStorage<T>>& s) {
  return s->requires_grad ? s->ensure_grad() : nullptr;
}

}  // namespace detail
}  // namespace forge

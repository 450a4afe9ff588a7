#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "spotter/common.hpp"

namespace spotter {

class Tape;

struct TensorImpl {
  std::vector<int64_t> shape;
  std::vector<scalar> data;
  std::vector<scalar> grad;  // empty until first accumulation
  bool requires_grad = false;
  int node = -1;             // producing tape node; -1 for leaves
  const Tape* tape = nullptr;
};

// Dense row-major tensor handle. Copies are shallow (shared storage); data is
// treated as immutable once an op has consumed it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, scalar value);
  static Tensor from_data(std::vector<int64_t> shape, std::vector<scalar> values);
  static Tensor scalar_of(scalar v);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(size_t axis) const { return impl_->shape[axis]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  std::vector<scalar>& data() { return impl_->data; }
  const std::vector<scalar>& data() const { return impl_->data; }
  scalar* ptr() { return impl_->data.data(); }
  const scalar* ptr() const { return impl_->data.data(); }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<scalar>& grad();
  const std::vector<scalar>& grad() const;
  void ensure_grad();
  void zero_grad();
  void drop_grad() { impl_->grad.clear(); }

  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }
  bool requires_grad() const { return impl_->requires_grad; }

  // Value of a single-element tensor.
  scalar item() const;
  scalar at(std::initializer_list<int64_t> idx) const;
  scalar& at(std::initializer_list<int64_t> idx);

  // Deep copy with no autodiff history.
  Tensor detached_copy() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  int64_t flat_index(std::initializer_list<int64_t> idx) const;
  std::shared_ptr<TensorImpl> impl_;
};

// Records one backward rule per forward operation, in execution order.
// Append order is a topological order of the expression DAG by construction,
// so reverse iteration is a valid backpropagation schedule. A tape must stay
// confined to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void clear() { nodes_.clear(); }
  size_t size() const { return nodes_.size(); }

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  int append_node(std::function<void()> backward) {
    nodes_.push_back(std::move(backward));
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Seeds d(loss)/d(loss) = 1 and walks the tape in reverse. Every leaf with
  // requires_grad set receives its accumulated gradient.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  bool recording_ = true;
};

namespace detail {

inline void ensure_grad_buffer(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), scalar(0));
}

// Apply on every op output in debug builds: forward ops on finite inputs
// must yield finite values.
void check_finite(const Tensor& t, const char* op);

// Piecewise-linear ops (relu gates, pooling argmaxes, sampler cells) mix
// their discrete decisions into this per-thread hash when it is armed.
// Finite-difference probes compare signatures between evaluations: a
// mismatch means the probe crossed a kink and the fd estimate is invalid.
uint64_t* gate_signature();
void set_gate_signature(uint64_t* slot);

inline void note_gates(uint64_t pattern_hash) {
  if (uint64_t* sig = gate_signature(); sig != nullptr)
    *sig = (*sig ^ pattern_hash) * 0x100000001b3ull;
}

inline bool gates_armed() { return gate_signature() != nullptr; }

}  // namespace detail

}  // namespace spotter

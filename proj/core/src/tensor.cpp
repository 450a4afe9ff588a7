#include "spotter/tensor.hpp"

#include <cmath>
#include <string>

namespace spotter {

namespace {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative dimension in tensor shape");
    n *= d;
  }
  return n;
}

}  // namespace

Tensor Tensor::zeros(std::vector<int64_t> shape) {
  auto impl = std::make_shared<TensorImpl>();
  const int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(n), scalar(0));
  return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int64_t> shape, scalar value) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.data()) v = value;
  return t;
}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<scalar> values) {
  const int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size()))
    throw ShapeError("from_data: " + std::to_string(values.size()) +
                     " values for a shape of " + std::to_string(n) + " elements");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar_of(scalar v) { return from_data({1}, {v}); }

std::vector<scalar>& Tensor::grad() {
  if (impl_->grad.empty()) throw ContractError("tensor has no gradient buffer");
  return impl_->grad;
}

const std::vector<scalar>& Tensor::grad() const {
  if (impl_->grad.empty()) throw ContractError("tensor has no gradient buffer");
  return impl_->grad;
}

void Tensor::ensure_grad() { detail::ensure_grad_buffer(*impl_); }

void Tensor::zero_grad() {
  for (auto& g : impl_->grad) g = scalar(0);
}

scalar Tensor::item() const {
  if (numel() != 1) throw ContractError("item(): tensor is not a single element");
  return impl_->data[0];
}

int64_t Tensor::flat_index(std::initializer_list<int64_t> idx) const {
  const auto& s = impl_->shape;
  if (idx.size() != s.size()) throw ShapeError("index rank mismatch");
  int64_t flat = 0;
  size_t axis = 0;
  for (int64_t i : idx) {
    if (i < 0 || i >= s[axis]) throw ShapeError("index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return flat;
}

scalar Tensor::at(std::initializer_list<int64_t> idx) const {
  return impl_->data[static_cast<size_t>(flat_index(idx))];
}

scalar& Tensor::at(std::initializer_list<int64_t> idx) {
  return impl_->data[static_cast<size_t>(flat_index(idx))];
}

Tensor Tensor::detached_copy() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward: loss must be a scalar tensor");
  const auto& impl = loss.impl();
  if (impl->node < 0 || impl->tape != this)
    throw ContractError("backward: loss was not produced on this tape");
  detail::ensure_grad_buffer(*impl);
  impl->grad[0] = scalar(1);
  for (int i = impl->node; i >= 0; --i) nodes_[static_cast<size_t>(i)]();
}

namespace detail {

namespace {
thread_local uint64_t* g_gate_signature = nullptr;
}

uint64_t* gate_signature() { return g_gate_signature; }
void set_gate_signature(uint64_t* slot) { g_gate_signature = slot; }

void check_finite(const Tensor& t, const char* op) {
#ifndef NDEBUG
  for (scalar v : t.data()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw std::logic_error(std::string("non-finite value produced by op ") + op);
  }
#else
  (void)t;
  (void)op;
#endif
}

}  // namespace detail

}  // namespace spotter

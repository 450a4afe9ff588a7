#pragma once

#include <vector>

#include "spotter/tensor.hpp"

namespace spotter {

// Per-channel batch-norm running statistics (inference-time normalisation).
struct RunningStats {
  std::vector<scalar> mean;
  std::vector<scalar> var;

  void init(int64_t channels) {
    mean.assign(static_cast<size_t>(channels), scalar(0));
    var.assign(static_cast<size_t>(channels), scalar(1));
  }
  void update(const std::vector<scalar>& batch_mean,
              const std::vector<scalar>& batch_var, scalar momentum);
};

// Collects the per-forward batch statistics of every batch-norm layer, in
// layer order. Used when running-stat folding must happen in sample order
// outside the forward pass (parallel batch workers).
struct BnObserver {
  std::vector<std::pair<std::vector<scalar>, std::vector<scalar>>> entries;
};

namespace ops {

// ---- elementwise / linear algebra -----------------------------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, scalar c);
// Elementwise product with a constant mask; masked components get an exactly
// zero gradient.
Tensor mul_mask(Tape& tape, const Tensor& a, const std::vector<scalar>& mask);
// a: R x C, bias: C; bias broadcast over rows.
Tensor add_rowvec(Tape& tape, const Tensor& a, const Tensor& bias);
// a: M x K, b: K x P -> M x P.
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

Tensor relu(Tape& tape, const Tensor& a);
Tensor sigmoid(Tape& tape, const Tensor& a);
Tensor tanh(Tape& tape, const Tensor& a);
// Last-axis softmax with max subtraction.
Tensor softmax(Tape& tape, const Tensor& a);

// ---- reductions ------------------------------------------------------------

// Sum of all elements -> shape {1}. Accumulates in double.
Tensor sum(Tape& tape, const Tensor& a);

// ---- structure -------------------------------------------------------------

Tensor reshape(Tape& tape, const Tensor& a, std::vector<int64_t> new_shape);
// a: R x A, b: R x B -> R x (A+B).
Tensor concat_cols(Tape& tape, const Tensor& a, const Tensor& b);
// a: R x C -> R x (end-begin).
Tensor slice_cols(Tape& tape, const Tensor& a, int64_t begin, int64_t end);
// rows: T tensors of shape 1 x K -> T x K.
Tensor stack_rows(Tape& tape, const std::vector<Tensor>& rows);

// ---- convolutional stack ---------------------------------------------------

// x: C x H x W, kernels: F x C x k x k (cross-correlation, zero padding).
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernels, int stride,
              int pad);

enum class PoolKind { Max, Avg };
// No padding; max backward routes to the first maximum in row-major window
// scan order, avg distributes 1/k^2.
Tensor pool(Tape& tape, const Tensor& x, PoolKind kind, int k, int stride);

// x: C x H x W -> 1 x C (per-channel spatial mean).
Tensor global_avg_pool(Tape& tape, const Tensor& x);

// x: C x H x W -> W x C; each output row is the height-mean of one feature
// column, giving the per-timestep features of the CTC head.
Tensor columns_over_width(Tape& tape, const Tensor& x);

// x: {N,C,H,W}, {C,H,W} (N=1) or {N,C}; gamma/beta: {C}. Train mode
// normalises by per-channel batch statistics (eps = 1e-5) and either updates
// `stats` in place (momentum 0.9) or, when `observer` is non-null, records
// the batch statistics for the caller to fold later. Infer mode uses `stats`.
Tensor batch_norm(Tape& tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, Mode mode, RunningStats& stats,
                  BnObserver* observer = nullptr);

// ---- losses ----------------------------------------------------------------

// logits: R x K, targets: R class indices -> mean cross-entropy, shape {1}.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                             const std::vector<int>& targets);

}  // namespace ops

inline constexpr scalar kBatchNormEps = scalar(1e-5);
inline constexpr scalar kBatchNormMomentum = scalar(0.9);

}  // namespace spotter

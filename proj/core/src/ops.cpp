#include "spotter/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>

namespace spotter {

void RunningStats::update(const std::vector<scalar>& batch_mean,
                          const std::vector<scalar>& batch_var,
                          scalar momentum) {
  for (size_t c = 0; c < mean.size(); ++c) {
    mean[c] = momentum * mean[c] + (scalar(1) - momentum) * batch_mean[c];
    var[c] = momentum * var[c] + (scalar(1) - momentum) * batch_var[c];
  }
}

namespace ops {

namespace {

using EMat = Eigen::Matrix<scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

bool want_node(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.recording()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

void mark_output(Tape& tape, Tensor& out, int node) {
  out.impl()->node = node;
  out.impl()->tape = &tape;
  out.impl()->requires_grad = true;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": operand shapes differ");
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<scalar> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  detail::check_finite(y, "add");
  if (want_node(tape, {&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    int id = tape.append_node([ai, bi, yi] {
      if (yi->grad.empty()) return;
      if (ai->requires_grad) {
        detail::ensure_grad_buffer(*ai);
        for (size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i];
      }
      if (bi->requires_grad) {
        detail::ensure_grad_buffer(*bi);
        for (size_t i = 0; i < yi->grad.size(); ++i) bi->grad[i] += yi->grad[i];
      }
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<scalar> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  detail::check_finite(y, "mul");
  if (want_node(tape, {&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    int id = tape.append_node([ai, bi, yi] {
      if (yi->grad.empty()) return;
      if (ai->requires_grad) {
        detail::ensure_grad_buffer(*ai);
        for (size_t i = 0; i < yi->grad.size(); ++i)
          ai->grad[i] += yi->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        detail::ensure_grad_buffer(*bi);
        for (size_t i = 0; i < yi->grad.size(); ++i)
          bi->grad[i] += yi->grad[i] * ai->data[i];
      }
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor scale(Tape& tape, const Tensor& a, scalar c) {
  std::vector<scalar> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = c * a.data()[i];
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  detail::check_finite(y, "scale");
  if (want_node(tape, {&a})) {
    auto ai = a.impl();
    auto yi = y.impl();
    int id = tape.append_node([ai, yi, c] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      detail::ensure_grad_buffer(*ai);
      for (size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += c * yi->grad[i];
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor mul_mask(Tape& tape, const Tensor& a, const std::vector<scalar>& mask) {
  if (mask.size() != a.data().size())
    throw ShapeError("mul_mask: mask size differs from tensor size");
  std::vector<scalar> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * mask[i];
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  if (want_node(tape, {&a})) {
    auto ai = a.impl();
    auto yi = y.impl();
    int id = tape.append_node([ai, yi, mask] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      detail::ensure_grad_buffer(*ai);
      for (size_t i = 0; i < yi->grad.size(); ++i)
        ai->grad[i] += yi->grad[i] * mask[i];
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor add_rowvec(Tape& tape, const Tensor& a, const Tensor& bias) {
  if (a.ndim() != 2 || bias.ndim() != 1 || bias.dim(0) != a.dim(1))
    throw ShapeError("add_rowvec: expected (R x C) + (C)");
  const int64_t rows = a.dim(0), cols = a.dim(1);
  std::vector<scalar> out(a.data().size());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c)
      out[static_cast<size_t>(r * cols + c)] =
          a.data()[static_cast<size_t>(r * cols + c)] + bias.data()[static_cast<size_t>(c)];
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  detail::check_finite(y, "add_rowvec");
  if (want_node(tape, {&a, &bias})) {
    auto ai = a.impl(), bi = bias.impl(), yi = y.impl();
    int id = tape.append_node([ai, bi, yi, rows, cols] {
      if (yi->grad.empty()) return;
      if (ai->requires_grad) {
        detail::ensure_grad_buffer(*ai);
        for (size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i];
      }
      if (bi->requires_grad) {
        detail::ensure_grad_buffer(*bi);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < cols; ++c)
            bi->grad[static_cast<size_t>(c)] += yi->grad[static_cast<size_t>(r * cols + c)];
      }
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("matmul: operands must be rank-2");
  const int64_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions disagree (" + std::to_string(k) +
                     " vs " + std::to_string(b.dim(0)) + ")");
  Tensor y = Tensor::zeros({m, p});
  MMap(y.ptr(), m, p).noalias() = CMap(a.ptr(), m, k) * CMap(b.ptr(), k, p);
  detail::check_finite(y, "matmul");
  if (want_node(tape, {&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    int id = tape.append_node([ai, bi, yi, m, k, p] {
      if (yi->grad.empty()) return;
      CMap dy(yi->grad.data(), m, p);
      if (ai->requires_grad) {
        detail::ensure_grad_buffer(*ai);
        MMap(ai->grad.data(), m, k).noalias() +=
            dy * CMap(bi->data.data(), k, p).transpose();
      }
      if (bi->requires_grad) {
        detail::ensure_grad_buffer(*bi);
        MMap(bi->grad.data(), k, p).noalias() +=
            CMap(ai->data.data(), m, k).transpose() * dy;
      }
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor relu(Tape& tape, const Tensor& a) {
  std::vector<scalar> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = a.data()[i] > scalar(0) ? a.data()[i] : scalar(0);
  if (detail::gates_armed()) {
    uint64_t h = 1469598103934665603ull;
    for (size_t i = 0; i < a.data().size(); ++i)
      h = (h ^ static_cast<uint64_t>(a.data()[i] > scalar(0) ? i * 2 + 1 : i * 2)) *
          0x100000001b3ull;
    detail::note_gates(h);
  }
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  if (want_node(tape, {&a})) {
    auto ai = a.impl();
    auto yi = y.impl();
    // Subgradient at exactly 0 is 0.
    int id = tape.append_node([ai, yi] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      detail::ensure_grad_buffer(*ai);
      for (size_t i = 0; i < yi->grad.size(); ++i)
        if (ai->data[i] > scalar(0)) ai->grad[i] += yi->grad[i];
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor sigmoid(Tape& tape, const Tensor& a) {
  std::vector<scalar> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    const double x = static_cast<double>(a.data()[i]);
    out[i] = static_cast<scalar>(1.0 / (1.0 + std::exp(-x)));
  }
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  detail::check_finite(y, "sigmoid");
  if (want_node(tape, {&a})) {
    auto ai = a.impl();
    auto yi = y.impl();
    int id = tape.append_node([ai, yi] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      detail::ensure_grad_buffer(*ai);
      for (size_t i = 0; i < yi->grad.size(); ++i) {
        const scalar s = yi->data[i];
        ai->grad[i] += yi->grad[i] * s * (scalar(1) - s);
      }
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor tanh(Tape& tape, const Tensor& a) {
  std::vector<scalar> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<scalar>(std::tanh(static_cast<double>(a.data()[i])));
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  detail::check_finite(y, "tanh");
  if (want_node(tape, {&a})) {
    auto ai = a.impl();
    auto yi = y.impl();
    int id = tape.append_node([ai, yi] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      detail::ensure_grad_buffer(*ai);
      for (size_t i = 0; i < yi->grad.size(); ++i) {
        const scalar t = yi->data[i];
        ai->grad[i] += yi->grad[i] * (scalar(1) - t * t);
      }
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor softmax(Tape& tape, const Tensor& a) {
  if (a.ndim() < 1 || a.dim(a.ndim() - 1) < 1)
    throw ShapeError("softmax: needs a non-empty last axis");
  const int64_t k = a.dim(a.ndim() - 1);
  const int64_t rows = a.numel() / k;
  std::vector<scalar> out(a.data().size());
  for (int64_t r = 0; r < rows; ++r) {
    const scalar* x = a.ptr() + r * k;
    scalar* y = out.data() + r * k;
    scalar mx = x[0];
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, x[i]);
    double denom = 0.0;
    for (int64_t i = 0; i < k; ++i) {
      const double e = std::exp(static_cast<double>(x[i] - mx));
      y[i] = static_cast<scalar>(e);
      denom += e;
    }
    for (int64_t i = 0; i < k; ++i) y[i] = static_cast<scalar>(y[i] / denom);
  }
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  detail::check_finite(y, "softmax");
  if (want_node(tape, {&a})) {
    auto ai = a.impl();
    auto yi = y.impl();
    int id = tape.append_node([ai, yi, rows, k] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      detail::ensure_grad_buffer(*ai);
      for (int64_t r = 0; r < rows; ++r) {
        const scalar* yv = yi->data.data() + r * k;
        const scalar* dy = yi->grad.data() + r * k;
        scalar* dx = ai->grad.data() + r * k;
        double dot = 0.0;
        for (int64_t i = 0; i < k; ++i) dot += static_cast<double>(dy[i]) * yv[i];
        for (int64_t i = 0; i < k; ++i)
          dx[i] += yv[i] * (dy[i] - static_cast<scalar>(dot));
      }
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor sum(Tape& tape, const Tensor& a) {
  double acc = 0.0;
  for (scalar v : a.data()) acc += static_cast<double>(v);
  Tensor y = Tensor::scalar_of(static_cast<scalar>(acc));
  detail::check_finite(y, "sum");
  if (want_node(tape, {&a})) {
    auto ai = a.impl();
    auto yi = y.impl();
    int id = tape.append_node([ai, yi] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      detail::ensure_grad_buffer(*ai);
      const scalar g = yi->grad[0];
      for (auto& dv : ai->grad) dv += g;
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor reshape(Tape& tape, const Tensor& a, std::vector<int64_t> new_shape) {
  Tensor y = Tensor::from_data(std::move(new_shape), a.data());
  if (y.numel() != a.numel()) throw ShapeError("reshape: element count changed");
  if (want_node(tape, {&a})) {
    auto ai = a.impl();
    auto yi = y.impl();
    int id = tape.append_node([ai, yi] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      detail::ensure_grad_buffer(*ai);
      for (size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i];
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor concat_cols(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError("concat_cols: row counts differ");
  const int64_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor y = Tensor::zeros({rows, ca + cb});
  for (int64_t r = 0; r < rows; ++r) {
    std::copy_n(a.ptr() + r * ca, ca, y.ptr() + r * (ca + cb));
    std::copy_n(b.ptr() + r * cb, cb, y.ptr() + r * (ca + cb) + ca);
  }
  if (want_node(tape, {&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    int id = tape.append_node([ai, bi, yi, rows, ca, cb] {
      if (yi->grad.empty()) return;
      for (int64_t r = 0; r < rows; ++r) {
        const scalar* dy = yi->grad.data() + r * (ca + cb);
        if (ai->requires_grad) {
          detail::ensure_grad_buffer(*ai);
          for (int64_t c = 0; c < ca; ++c) ai->grad[static_cast<size_t>(r * ca + c)] += dy[c];
        }
        if (bi->requires_grad) {
          detail::ensure_grad_buffer(*bi);
          for (int64_t c = 0; c < cb; ++c) bi->grad[static_cast<size_t>(r * cb + c)] += dy[ca + c];
        }
      }
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor slice_cols(Tape& tape, const Tensor& a, int64_t begin, int64_t end) {
  if (a.ndim() != 2) throw ShapeError("slice_cols: rank-2 input required");
  const int64_t rows = a.dim(0), cols = a.dim(1);
  if (begin < 0 || end > cols || begin >= end)
    throw ShapeError("slice_cols: bad column range");
  const int64_t out_c = end - begin;
  Tensor y = Tensor::zeros({rows, out_c});
  for (int64_t r = 0; r < rows; ++r)
    std::copy_n(a.ptr() + r * cols + begin, out_c, y.ptr() + r * out_c);
  if (want_node(tape, {&a})) {
    auto ai = a.impl();
    auto yi = y.impl();
    int id = tape.append_node([ai, yi, rows, cols, begin, out_c] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      detail::ensure_grad_buffer(*ai);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < out_c; ++c)
          ai->grad[static_cast<size_t>(r * cols + begin + c)] +=
              yi->grad[static_cast<size_t>(r * out_c + c)];
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor stack_rows(Tape& tape, const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no rows");
  const int64_t k = rows[0].numel();
  for (const auto& r : rows)
    if (r.numel() != k) throw ShapeError("stack_rows: row sizes differ");
  const int64_t t = static_cast<int64_t>(rows.size());
  Tensor y = Tensor::zeros({t, k});
  for (int64_t r = 0; r < t; ++r)
    std::copy_n(rows[static_cast<size_t>(r)].ptr(), k, y.ptr() + r * k);
  bool any = false;
  for (const auto& r : rows) any = any || r.requires_grad();
  if (tape.recording() && any) {
    std::vector<std::shared_ptr<TensorImpl>> row_impls;
    row_impls.reserve(rows.size());
    for (const auto& r : rows) row_impls.push_back(r.impl());
    auto yi = y.impl();
    int id = tape.append_node([row_impls, yi, k] {
      if (yi->grad.empty()) return;
      for (size_t r = 0; r < row_impls.size(); ++r) {
        auto& ri = *row_impls[r];
        if (!ri.requires_grad) continue;
        detail::ensure_grad_buffer(ri);
        for (int64_t c = 0; c < k; ++c)
          ri.grad[static_cast<size_t>(c)] += yi->grad[r * static_cast<size_t>(k) + static_cast<size_t>(c)];
      }
    });
    mark_output(tape, y, id);
  }
  return y;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                             const std::vector<int>& targets) {
  if (logits.ndim() != 2) throw ShapeError("softmax_cross_entropy: logits must be R x K");
  const int64_t rows = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != rows)
    throw ShapeError("softmax_cross_entropy: one target per row required");
  for (int t : targets)
    if (t < 0 || t >= k) throw ContractError("softmax_cross_entropy: target class out of range");

  std::vector<scalar> probs(logits.data().size());
  double loss = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    const scalar* x = logits.ptr() + r * k;
    scalar* p = probs.data() + r * k;
    scalar mx = x[0];
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, x[i]);
    double denom = 0.0;
    for (int64_t i = 0; i < k; ++i) {
      const double e = std::exp(static_cast<double>(x[i] - mx));
      p[i] = static_cast<scalar>(e);
      denom += e;
    }
    for (int64_t i = 0; i < k; ++i) p[i] = static_cast<scalar>(p[i] / denom);
    const double lse = std::log(denom) + static_cast<double>(mx);
    loss += lse - static_cast<double>(x[targets[static_cast<size_t>(r)]]);
  }
  loss /= static_cast<double>(rows);
  Tensor y = Tensor::scalar_of(static_cast<scalar>(loss));
  detail::check_finite(y, "softmax_cross_entropy");
  if (want_node(tape, {&logits})) {
    auto li = logits.impl();
    auto yi = y.impl();
    int id = tape.append_node([li, yi, probs = std::move(probs), targets, rows, k] {
      if (yi->grad.empty() || !li->requires_grad) return;
      detail::ensure_grad_buffer(*li);
      const scalar g = yi->grad[0] / static_cast<scalar>(rows);
      for (int64_t r = 0; r < rows; ++r) {
        const scalar* p = probs.data() + r * k;
        scalar* dx = li->grad.data() + r * k;
        const int t = targets[static_cast<size_t>(r)];
        for (int64_t i = 0; i < k; ++i) {
          scalar delta = p[i];
          if (i == t) delta -= scalar(1);
          dx[i] += g * delta;
        }
      }
    });
    mark_output(tape, y, id);
  }
  return y;
}

}  // namespace ops
}  // namespace spotter

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>

#include "spotter/ops.hpp"

namespace spotter {
namespace ops {

namespace {

using EMat = Eigen::Matrix<scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

struct ConvDims {
  int64_t c, h, w, f, k;
  int stride, pad;
  int64_t oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& kernels, int stride, int pad) {
  if (x.ndim() != 3) throw ShapeError("conv2d: input must be C x H x W");
  if (kernels.ndim() != 4) throw ShapeError("conv2d: kernels must be F x C x k x k");
  ConvDims d{};
  d.c = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.f = kernels.dim(0);
  d.k = kernels.dim(2);
  d.stride = stride;
  d.pad = pad;
  if (kernels.dim(1) != d.c)
    throw ShapeError("conv2d: kernel channel count " + std::to_string(kernels.dim(1)) +
                     " does not match input channels " + std::to_string(d.c));
  if (kernels.dim(3) != d.k) throw ShapeError("conv2d: kernels must be square");
  if (d.k % 2 == 0) throw ContractError("conv2d: kernel size must be odd");
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  const int64_t nh = d.h + 2 * pad - d.k;
  const int64_t nw = d.w + 2 * pad - d.k;
  if (nh < 0 || nw < 0 || nh % stride != 0 || nw % stride != 0)
    throw ShapeError("conv2d: non-integral output size for input " + std::to_string(d.h) +
                     "x" + std::to_string(d.w) + ", k=" + std::to_string(d.k) +
                     ", stride=" + std::to_string(stride) + ", pad=" + std::to_string(pad));
  d.oh = nh / stride + 1;
  d.ow = nw / stride + 1;
  return d;
}

// col is (C*k*k) x (oh*ow), row-major.
void im2col(const scalar* x, const ConvDims& d, scalar* col) {
  const int64_t patch = d.oh * d.ow;
  for (int64_t c = 0; c < d.c; ++c) {
    for (int64_t ki = 0; ki < d.k; ++ki) {
      for (int64_t kj = 0; kj < d.k; ++kj) {
        scalar* row = col + ((c * d.k + ki) * d.k + kj) * patch;
        for (int64_t oi = 0; oi < d.oh; ++oi) {
          const int64_t ii = oi * d.stride - d.pad + ki;
          scalar* dst = row + oi * d.ow;
          if (ii < 0 || ii >= d.h) {
            std::fill_n(dst, d.ow, scalar(0));
            continue;
          }
          const scalar* src = x + (c * d.h + ii) * d.w;
          for (int64_t oj = 0; oj < d.ow; ++oj) {
            const int64_t jj = oj * d.stride - d.pad + kj;
            dst[oj] = (jj >= 0 && jj < d.w) ? src[jj] : scalar(0);
          }
        }
      }
    }
  }
}

void col2im_add(const scalar* col, const ConvDims& d, scalar* dx) {
  const int64_t patch = d.oh * d.ow;
  for (int64_t c = 0; c < d.c; ++c) {
    for (int64_t ki = 0; ki < d.k; ++ki) {
      for (int64_t kj = 0; kj < d.k; ++kj) {
        const scalar* row = col + ((c * d.k + ki) * d.k + kj) * patch;
        for (int64_t oi = 0; oi < d.oh; ++oi) {
          const int64_t ii = oi * d.stride - d.pad + ki;
          if (ii < 0 || ii >= d.h) continue;
          scalar* dst = dx + (c * d.h + ii) * d.w;
          const scalar* src = row + oi * d.ow;
          for (int64_t oj = 0; oj < d.ow; ++oj) {
            const int64_t jj = oj * d.stride - d.pad + kj;
            if (jj >= 0 && jj < d.w) dst[jj] += src[oj];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernels, int stride,
              int pad) {
  const ConvDims d = conv_dims(x, kernels, stride, pad);
  const int64_t patch = d.oh * d.ow;
  const int64_t krows = d.c * d.k * d.k;

  std::vector<scalar> col(static_cast<size_t>(krows * patch));
  im2col(x.ptr(), d, col.data());

  Tensor y = Tensor::zeros({d.f, d.oh, d.ow});
  MMap(y.ptr(), d.f, patch).noalias() =
      CMap(kernels.ptr(), d.f, krows) * CMap(col.data(), krows, patch);
  detail::check_finite(y, "conv2d");

  if (tape.recording() && (x.requires_grad() || kernels.requires_grad())) {
    auto xi = x.impl(), ki = kernels.impl(), yi = y.impl();
    int id = tape.append_node([xi, ki, yi, d, krows, patch] {
      if (yi->grad.empty()) return;
      CMap dy(yi->grad.data(), d.f, patch);
      if (ki->requires_grad) {
        // dW = dY * col^T; the column matrix is recomputed rather than kept
        // alive on the tape.
        std::vector<scalar> col(static_cast<size_t>(krows * patch));
        im2col(xi->data.data(), d, col.data());
        detail::ensure_grad_buffer(*ki);
        MMap(ki->grad.data(), d.f, krows).noalias() +=
            dy * CMap(col.data(), krows, patch).transpose();
      }
      if (xi->requires_grad) {
        std::vector<scalar> dcol(static_cast<size_t>(krows * patch));
        MMap(dcol.data(), krows, patch).noalias() =
            CMap(ki->data.data(), d.f, krows).transpose() * dy;
        detail::ensure_grad_buffer(*xi);
        col2im_add(dcol.data(), d, xi->grad.data());
      }
    });
    yi->node = id;
    yi->tape = &tape;
    yi->requires_grad = true;
  }
  return y;
}

Tensor pool(Tape& tape, const Tensor& x, PoolKind kind, int k, int stride) {
  if (x.ndim() != 3) throw ShapeError("pool: input must be C x H x W");
  const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (k < 1 || stride < 1) throw ContractError("pool: window and stride must be >= 1");
  if (k > h || k > w)
    throw ShapeError("pool: window " + std::to_string(k) + " larger than input " +
                     std::to_string(h) + "x" + std::to_string(w));
  const int64_t oh = (h - k) / stride + 1;
  const int64_t ow = (w - k) / stride + 1;
  Tensor y = Tensor::zeros({c, oh, ow});

  std::vector<int64_t> argmax;
  if (kind == PoolKind::Max) argmax.resize(static_cast<size_t>(c * oh * ow));
  const scalar inv = scalar(1) / static_cast<scalar>(k * k);

  for (int64_t ch = 0; ch < c; ++ch) {
    const scalar* plane = x.ptr() + ch * h * w;
    for (int64_t oi = 0; oi < oh; ++oi) {
      for (int64_t oj = 0; oj < ow; ++oj) {
        const int64_t i0 = oi * stride, j0 = oj * stride;
        if (kind == PoolKind::Max) {
          scalar best = plane[i0 * w + j0];
          int64_t best_idx = i0 * w + j0;
          for (int64_t di = 0; di < k; ++di)
            for (int64_t dj = 0; dj < k; ++dj) {
              const int64_t idx = (i0 + di) * w + (j0 + dj);
              if (plane[idx] > best) {  // strict: first occurrence wins ties
                best = plane[idx];
                best_idx = idx;
              }
            }
          y.ptr()[(ch * oh + oi) * ow + oj] = best;
          argmax[static_cast<size_t>((ch * oh + oi) * ow + oj)] = best_idx;
        } else {
          double acc = 0.0;
          for (int64_t di = 0; di < k; ++di)
            for (int64_t dj = 0; dj < k; ++dj)
              acc += static_cast<double>(plane[(i0 + di) * w + (j0 + dj)]);
          y.ptr()[(ch * oh + oi) * ow + oj] = static_cast<scalar>(acc * inv);
        }
      }
    }
  }

  if (kind == PoolKind::Max && detail::gates_armed()) {
    uint64_t sig = 1469598103934665603ull;
    for (size_t i = 0; i < argmax.size(); ++i)
      sig = (sig ^ static_cast<uint64_t>(argmax[i])) * 0x100000001b3ull;
    detail::note_gates(sig);
  }

  if (tape.recording() && x.requires_grad()) {
    auto xi = x.impl();
    auto yi = y.impl();
    int id = tape.append_node([xi, yi, kind, k, stride, c, h, w, oh, ow, inv,
                               argmax = std::move(argmax)] {
      if (yi->grad.empty() || !xi->requires_grad) return;
      detail::ensure_grad_buffer(*xi);
      for (int64_t ch = 0; ch < c; ++ch) {
        scalar* dplane = xi->grad.data() + ch * h * w;
        for (int64_t oi = 0; oi < oh; ++oi)
          for (int64_t oj = 0; oj < ow; ++oj) {
            const scalar g = yi->grad[static_cast<size_t>((ch * oh + oi) * ow + oj)];
            if (kind == PoolKind::Max) {
              dplane[argmax[static_cast<size_t>((ch * oh + oi) * ow + oj)]] += g;
            } else {
              const int64_t i0 = oi * stride, j0 = oj * stride;
              for (int64_t di = 0; di < k; ++di)
                for (int64_t dj = 0; dj < k; ++dj)
                  dplane[(i0 + di) * w + (j0 + dj)] += g * inv;
            }
          }
      }
    });
    yi->node = id;
    yi->tape = &tape;
    yi->requires_grad = true;
  }
  return y;
}

Tensor global_avg_pool(Tape& tape, const Tensor& x) {
  if (x.ndim() != 3) throw ShapeError("global_avg_pool: input must be C x H x W");
  const int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  Tensor y = Tensor::zeros({1, c});
  for (int64_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    const scalar* p = x.ptr() + ch * hw;
    for (int64_t i = 0; i < hw; ++i) acc += static_cast<double>(p[i]);
    y.ptr()[ch] = static_cast<scalar>(acc / static_cast<double>(hw));
  }
  if (tape.recording() && x.requires_grad()) {
    auto xi = x.impl();
    auto yi = y.impl();
    int id = tape.append_node([xi, yi, c, hw] {
      if (yi->grad.empty() || !xi->requires_grad) return;
      detail::ensure_grad_buffer(*xi);
      const scalar inv = scalar(1) / static_cast<scalar>(hw);
      for (int64_t ch = 0; ch < c; ++ch) {
        const scalar g = yi->grad[static_cast<size_t>(ch)] * inv;
        scalar* dp = xi->grad.data() + ch * hw;
        for (int64_t i = 0; i < hw; ++i) dp[i] += g;
      }
    });
    yi->node = id;
    yi->tape = &tape;
    yi->requires_grad = true;
  }
  return y;
}

Tensor columns_over_width(Tape& tape, const Tensor& x) {
  if (x.ndim() != 3) throw ShapeError("columns_over_width: input must be C x H x W");
  const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == 0) throw ShapeError("columns_over_width: empty height");
  Tensor y = Tensor::zeros({w, c});
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t j = 0; j < w; ++j) {
      double acc = 0.0;
      for (int64_t i = 0; i < h; ++i)
        acc += static_cast<double>(x.ptr()[(ch * h + i) * w + j]);
      y.ptr()[j * c + ch] = static_cast<scalar>(acc / static_cast<double>(h));
    }
  if (tape.recording() && x.requires_grad()) {
    auto xi = x.impl();
    auto yi = y.impl();
    int id = tape.append_node([xi, yi, c, h, w] {
      if (yi->grad.empty() || !xi->requires_grad) return;
      detail::ensure_grad_buffer(*xi);
      const scalar inv = scalar(1) / static_cast<scalar>(h);
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t j = 0; j < w; ++j) {
          const scalar g = yi->grad[static_cast<size_t>(j * c + ch)] * inv;
          for (int64_t i = 0; i < h; ++i) xi->grad[static_cast<size_t>((ch * h + i) * w + j)] += g;
        }
    });
    yi->node = id;
    yi->tape = &tape;
    yi->requires_grad = true;
  }
  return y;
}

namespace {

// Channel decomposition for batch norm: (outer, C, inner) with statistics
// over outer*inner positions per channel.
struct BnDims {
  int64_t outer, c, inner;
};

BnDims bn_dims(const Tensor& x) {
  BnDims d{};
  switch (x.ndim()) {
    case 2: d = {x.dim(0), x.dim(1), 1}; break;            // N x C
    case 3: d = {1, x.dim(0), x.dim(1) * x.dim(2)}; break;  // C x H x W
    case 4: d = {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}; break;
    default: throw ShapeError("batch_norm: rank must be 2, 3 or 4");
  }
  if (d.outer * d.inner == 0) throw ShapeError("batch_norm: zero-size batch");
  return d;
}

}  // namespace

Tensor batch_norm(Tape& tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, Mode mode, RunningStats& stats,
                  BnObserver* observer) {
  const BnDims d = bn_dims(x);
  if (gamma.numel() != d.c || beta.numel() != d.c)
    throw ShapeError("batch_norm: gamma/beta length must equal channel count");
  if (static_cast<int64_t>(stats.mean.size()) != d.c)
    throw ShapeError("batch_norm: running stats not sized to channel count");

  const int64_t m = d.outer * d.inner;
  std::vector<double> mean(static_cast<size_t>(d.c)), var(static_cast<size_t>(d.c));
  if (mode == Mode::Train) {
    for (int64_t c = 0; c < d.c; ++c) {
      double acc = 0.0;
      for (int64_t o = 0; o < d.outer; ++o) {
        const scalar* p = x.ptr() + (o * d.c + c) * d.inner;
        for (int64_t i = 0; i < d.inner; ++i) acc += static_cast<double>(p[i]);
      }
      const double mu = acc / static_cast<double>(m);
      double vacc = 0.0;
      for (int64_t o = 0; o < d.outer; ++o) {
        const scalar* p = x.ptr() + (o * d.c + c) * d.inner;
        for (int64_t i = 0; i < d.inner; ++i) {
          const double dlt = static_cast<double>(p[i]) - mu;
          vacc += dlt * dlt;
        }
      }
      mean[static_cast<size_t>(c)] = mu;
      var[static_cast<size_t>(c)] = vacc / static_cast<double>(m);
    }
    std::vector<scalar> mean_s(mean.begin(), mean.end());
    std::vector<scalar> var_s(var.begin(), var.end());
    if (observer != nullptr) {
      observer->entries.emplace_back(std::move(mean_s), std::move(var_s));
    } else {
      stats.update(mean_s, var_s, kBatchNormMomentum);
    }
  } else {
    mean.assign(stats.mean.begin(), stats.mean.end());
    var.assign(stats.var.begin(), stats.var.end());
  }

  std::vector<scalar> invstd(static_cast<size_t>(d.c));
  for (int64_t c = 0; c < d.c; ++c)
    invstd[static_cast<size_t>(c)] = static_cast<scalar>(
        1.0 / std::sqrt(var[static_cast<size_t>(c)] + static_cast<double>(kBatchNormEps)));

  // Normalisation happens in double so the per-channel mean/invstd rounding
  // does not bias the whole channel coherently; the output is still cast to
  // the working precision per element.
  Tensor y = Tensor::zeros(x.shape());
  std::vector<scalar> xhat(x.data().size());
  for (int64_t o = 0; o < d.outer; ++o)
    for (int64_t c = 0; c < d.c; ++c) {
      const scalar* p = x.ptr() + (o * d.c + c) * d.inner;
      scalar* q = y.ptr() + (o * d.c + c) * d.inner;
      scalar* xh = xhat.data() + (o * d.c + c) * d.inner;
      const double mu = mean[static_cast<size_t>(c)];
      const double is = 1.0 / std::sqrt(var[static_cast<size_t>(c)] +
                                        static_cast<double>(kBatchNormEps));
      const double g = static_cast<double>(gamma.data()[static_cast<size_t>(c)]);
      const double b = static_cast<double>(beta.data()[static_cast<size_t>(c)]);
      for (int64_t i = 0; i < d.inner; ++i) {
        const double nx = (static_cast<double>(p[i]) - mu) * is;
        xh[i] = static_cast<scalar>(nx);
        q[i] = static_cast<scalar>(g * nx + b);
      }
    }
  detail::check_finite(y, "batch_norm");

  if (tape.recording() &&
      (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl();
    const bool train = mode == Mode::Train;
    int id = tape.append_node([xi, gi, bi, yi, d, m, train,
                               xhat = std::move(xhat),
                               invstd = std::move(invstd)] {
      if (yi->grad.empty()) return;
      // Per-channel reductions of dy and dy*xhat drive every gradient.
      std::vector<double> sum_dy(static_cast<size_t>(d.c), 0.0);
      std::vector<double> sum_dy_xhat(static_cast<size_t>(d.c), 0.0);
      for (int64_t o = 0; o < d.outer; ++o)
        for (int64_t c = 0; c < d.c; ++c) {
          const scalar* dy = yi->grad.data() + (o * d.c + c) * d.inner;
          const scalar* xh = xhat.data() + (o * d.c + c) * d.inner;
          double s0 = 0.0, s1 = 0.0;
          for (int64_t i = 0; i < d.inner; ++i) {
            s0 += static_cast<double>(dy[i]);
            s1 += static_cast<double>(dy[i]) * static_cast<double>(xh[i]);
          }
          sum_dy[static_cast<size_t>(c)] += s0;
          sum_dy_xhat[static_cast<size_t>(c)] += s1;
        }
      if (bi->requires_grad) {
        detail::ensure_grad_buffer(*bi);
        for (int64_t c = 0; c < d.c; ++c)
          bi->grad[static_cast<size_t>(c)] += static_cast<scalar>(sum_dy[static_cast<size_t>(c)]);
      }
      if (gi->requires_grad) {
        detail::ensure_grad_buffer(*gi);
        for (int64_t c = 0; c < d.c; ++c)
          gi->grad[static_cast<size_t>(c)] +=
              static_cast<scalar>(sum_dy_xhat[static_cast<size_t>(c)]);
      }
      if (xi->requires_grad) {
        detail::ensure_grad_buffer(*xi);
        const double inv_m = 1.0 / static_cast<double>(m);
        for (int64_t o = 0; o < d.outer; ++o)
          for (int64_t c = 0; c < d.c; ++c) {
            const scalar* dy = yi->grad.data() + (o * d.c + c) * d.inner;
            const scalar* xh = xhat.data() + (o * d.c + c) * d.inner;
            scalar* dx = xi->grad.data() + (o * d.c + c) * d.inner;
            const double g = static_cast<double>(gi->data[static_cast<size_t>(c)]);
            const double is = static_cast<double>(invstd[static_cast<size_t>(c)]);
            if (train) {
              const double mdy = sum_dy[static_cast<size_t>(c)] * inv_m;
              const double mdyx = sum_dy_xhat[static_cast<size_t>(c)] * inv_m;
              for (int64_t i = 0; i < d.inner; ++i)
                dx[i] += static_cast<scalar>(
                    g * is * (static_cast<double>(dy[i]) - mdy -
                              static_cast<double>(xh[i]) * mdyx));
            } else {
              for (int64_t i = 0; i < d.inner; ++i)
                dx[i] += static_cast<scalar>(g * is * static_cast<double>(dy[i]));
            }
          }
      }
    });
    yi->node = id;
    yi->tape = &tape;
    yi->requires_grad = true;
  }
  return y;
}

}  // namespace ops
}  // namespace spotter

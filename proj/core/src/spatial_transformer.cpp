#include "spotter/spatial_transformer.hpp"

#include <algorithm>
#include <cmath>

namespace spotter {

namespace {

// Pixel-space base coordinates. base(j) = j * scale - half, with
// scale = (in_extent-1)/(out_extent-1); this form keeps the identity
// transform exact: theta = I collapses to (j - half) + half = j.
struct GridBasis {
  std::vector<double> bux, buy;  // contributions to u from x(j) and y(i)
  std::vector<double> bvx, bvy;  // contributions to v
  double half_w = 0, half_h = 0;
};

GridBasis make_basis(int out_h, int out_w, int in_h, int in_w) {
  GridBasis b;
  b.half_w = 0.5 * (in_w - 1);
  b.half_h = 0.5 * (in_h - 1);
  b.bux.resize(static_cast<size_t>(out_w));
  b.bvx.resize(static_cast<size_t>(out_w));
  b.buy.resize(static_cast<size_t>(out_h));
  b.bvy.resize(static_cast<size_t>(out_h));
  const double sx_u = out_w > 1 ? static_cast<double>(in_w - 1) / (out_w - 1) : 0.0;
  const double sx_v = out_w > 1 ? static_cast<double>(in_h - 1) / (out_w - 1) : 0.0;
  const double sy_u = out_h > 1 ? static_cast<double>(in_w - 1) / (out_h - 1) : 0.0;
  const double sy_v = out_h > 1 ? static_cast<double>(in_h - 1) / (out_h - 1) : 0.0;
  for (int j = 0; j < out_w; ++j) {
    b.bux[static_cast<size_t>(j)] = out_w > 1 ? j * sx_u - b.half_w : 0.0;
    b.bvx[static_cast<size_t>(j)] = out_w > 1 ? j * sx_v - b.half_h : 0.0;
  }
  for (int i = 0; i < out_h; ++i) {
    b.buy[static_cast<size_t>(i)] = out_h > 1 ? i * sy_u - b.half_w : 0.0;
    b.bvy[static_cast<size_t>(i)] = out_h > 1 ? i * sy_v - b.half_h : 0.0;
  }
  return b;
}

void fill_grid(const std::array<double, 6>& t, const GridBasis& b,
               SamplingGrid& g) {
  const double cu = b.half_w * (t[2] + 1.0);
  const double cv = b.half_h * (t[5] + 1.0);
  for (int i = 0; i < g.out_h; ++i) {
    const double uy = t[1] * b.buy[static_cast<size_t>(i)];
    const double vy = t[4] * b.bvy[static_cast<size_t>(i)];
    for (int j = 0; j < g.out_w; ++j) {
      const size_t idx = static_cast<size_t>(i) * g.out_w + j;
      g.u[idx] = t[0] * b.bux[static_cast<size_t>(j)] + uy + cu;
      g.v[idx] = t[3] * b.bvx[static_cast<size_t>(j)] + vy + cv;
    }
  }
}

// Left-continuous corner split: x0 = ceil(u) - 1, so at integer coordinates
// the full weight sits on the right cell and the coordinate gradient is the
// left-hand subderivative of the interpolation kernel.
inline void corner_split(double coord, int64_t& c0, double& w1) {
  const double c = std::ceil(coord);
  c0 = static_cast<int64_t>(c) - 1;
  w1 = coord - static_cast<double>(c0);
}

}  // namespace

bool AffineParams::finite() const {
  for (double t : theta)
    if (!std::isfinite(t)) return false;
  return true;
}

double BoundingBox::min_x() const {
  double m = corners[0][0];
  for (const auto& c : corners) m = std::min(m, c[0]);
  return m;
}
double BoundingBox::min_y() const {
  double m = corners[0][1];
  for (const auto& c : corners) m = std::min(m, c[1]);
  return m;
}
double BoundingBox::max_x() const {
  double m = corners[0][0];
  for (const auto& c : corners) m = std::max(m, c[0]);
  return m;
}
double BoundingBox::max_y() const {
  double m = corners[0][1];
  for (const auto& c : corners) m = std::max(m, c[1]);
  return m;
}

bool BoundingBox::axis_aligned() const {
  // TL/TR and BL/BR share y; TL/BL and TR/BR share x. Exact comparison.
  return corners[0][1] == corners[1][1] && corners[2][1] == corners[3][1] &&
         corners[0][0] == corners[2][0] && corners[1][0] == corners[3][0];
}

SamplingGrid generate_grid(const AffineParams& theta, int out_h, int out_w,
                           int in_h, int in_w) {
  if (out_h < 1 || out_w < 1)
    throw ContractError("generate_grid: output size must be >= 1");
  if (in_h < 1 || in_w < 1)
    throw ContractError("generate_grid: input size must be >= 1");
  if (!theta.finite())
    throw ContractError("generate_grid: non-finite affine parameters");
  SamplingGrid g;
  g.out_h = out_h;
  g.out_w = out_w;
  g.in_h = in_h;
  g.in_w = in_w;
  g.u.resize(static_cast<size_t>(out_h) * out_w);
  g.v.resize(static_cast<size_t>(out_h) * out_w);
  fill_grid(theta.theta, make_basis(out_h, out_w, in_h, in_w), g);
  return g;
}

namespace {

struct SampleGrads {
  bool want_input = false;
  bool want_coords = false;
  std::vector<scalar>* dinput = nullptr;
  std::vector<double>* du = nullptr;
  std::vector<double>* dv = nullptr;
};

// Shared forward/backward kernel. When `out` is non-null the forward value is
// written; when grads.want_* is set the upstream gradient `gy` is scattered.
void sample_kernel(const std::vector<scalar>& img, int64_t c_count, int64_t h,
                   int64_t w, const SamplingGrid& grid, std::vector<scalar>* out,
                   const std::vector<scalar>* gy, const SampleGrads& grads) {
  const int64_t cells = static_cast<int64_t>(grid.out_h) * grid.out_w;
  // The interpolation cell of each grid point is a discrete decision; record
  // it for finite-difference kink detection (forward passes only).
  if (out != nullptr && detail::gates_armed()) {
    uint64_t sig = 1469598103934665603ull;
    for (int64_t cell = 0; cell < cells; ++cell) {
      sig = (sig ^ static_cast<uint64_t>(static_cast<int64_t>(
                std::ceil(grid.u[static_cast<size_t>(cell)])))) * 0x100000001b3ull;
      sig = (sig ^ static_cast<uint64_t>(static_cast<int64_t>(
                std::ceil(grid.v[static_cast<size_t>(cell)])))) * 0x100000001b3ull;
    }
    detail::note_gates(sig);
  }
  for (int64_t cell = 0; cell < cells; ++cell) {
    int64_t x0, y0;
    double wx1, wy1;
    corner_split(grid.u[static_cast<size_t>(cell)], x0, wx1);
    corner_split(grid.v[static_cast<size_t>(cell)], y0, wy1);
    const double wx0 = 1.0 - wx1, wy0 = 1.0 - wy1;
    const int64_t x1 = x0 + 1, y1 = y0 + 1;
    const bool in_x0 = x0 >= 0 && x0 < w, in_x1 = x1 >= 0 && x1 < w;
    const bool in_y0 = y0 >= 0 && y0 < h, in_y1 = y1 >= 0 && y1 < h;

    double du_cell = 0.0, dv_cell = 0.0;
    for (int64_t c = 0; c < c_count; ++c) {
      const scalar* plane = img.data() + c * h * w;
      const double i00 = (in_y0 && in_x0) ? static_cast<double>(plane[y0 * w + x0]) : 0.0;
      const double i01 = (in_y0 && in_x1) ? static_cast<double>(plane[y0 * w + x1]) : 0.0;
      const double i10 = (in_y1 && in_x0) ? static_cast<double>(plane[y1 * w + x0]) : 0.0;
      const double i11 = (in_y1 && in_x1) ? static_cast<double>(plane[y1 * w + x1]) : 0.0;
      if (out != nullptr) {
        const double val = wy0 * (wx0 * i00 + wx1 * i01) + wy1 * (wx0 * i10 + wx1 * i11);
        (*out)[static_cast<size_t>(c * cells + cell)] = static_cast<scalar>(val);
      }
      if (gy != nullptr) {
        const double g = static_cast<double>((*gy)[static_cast<size_t>(c * cells + cell)]);
        if (grads.want_input) {
          auto& di = *grads.dinput;
          if (in_y0 && in_x0) di[static_cast<size_t>(c * h * w + y0 * w + x0)] += static_cast<scalar>(g * wy0 * wx0);
          if (in_y0 && in_x1) di[static_cast<size_t>(c * h * w + y0 * w + x1)] += static_cast<scalar>(g * wy0 * wx1);
          if (in_y1 && in_x0) di[static_cast<size_t>(c * h * w + y1 * w + x0)] += static_cast<scalar>(g * wy1 * wx0);
          if (in_y1 && in_x1) di[static_cast<size_t>(c * h * w + y1 * w + x1)] += static_cast<scalar>(g * wy1 * wx1);
        }
        if (grads.want_coords) {
          du_cell += g * (wy0 * (i01 - i00) + wy1 * (i11 - i10));
          dv_cell += g * (wx0 * (i10 - i00) + wx1 * (i11 - i01));
        }
      }
    }
    if (grads.want_coords) {
      (*grads.du)[static_cast<size_t>(cell)] = du_cell;
      (*grads.dv)[static_cast<size_t>(cell)] = dv_cell;
    }
  }
}

void check_grid_finite(const SamplingGrid& grid) {
  for (double x : grid.u)
    if (!std::isfinite(x)) throw ContractError("sampling grid has non-finite u coordinate");
  for (double x : grid.v)
    if (!std::isfinite(x)) throw ContractError("sampling grid has non-finite v coordinate");
}

}  // namespace

Tensor bilinear_sample(Tape& tape, const Tensor& input, const SamplingGrid& grid) {
  if (input.ndim() != 3) throw ShapeError("bilinear_sample: input must be C x H x W");
  const int64_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (grid.in_h != h || grid.in_w != w)
    throw ShapeError("bilinear_sample: grid was generated for a different input size");
  check_grid_finite(grid);

  Tensor y = Tensor::zeros({c, grid.out_h, grid.out_w});
  sample_kernel(input.data(), c, h, w, grid, &y.data(), nullptr, {});
  detail::check_finite(y, "bilinear_sample");

  if (tape.recording() && input.requires_grad()) {
    auto xi = input.impl();
    auto yi = y.impl();
    int id = tape.append_node([xi, yi, grid, c, h, w] {
      if (yi->grad.empty() || !xi->requires_grad) return;
      detail::ensure_grad_buffer(*xi);
      SampleGrads g;
      g.want_input = true;
      g.dinput = &xi->grad;
      sample_kernel(xi->data, c, h, w, grid, nullptr, &yi->grad, g);
    });
    yi->node = id;
    yi->tape = &tape;
    yi->requires_grad = true;
  }
  return y;
}

Tensor affine_crop(Tape& tape, const Tensor& input, const Tensor& theta,
                   int out_h, int out_w) {
  if (input.ndim() != 3) throw ShapeError("affine_crop: input must be C x H x W");
  if (theta.numel() != 6) throw ShapeError("affine_crop: theta must have 6 elements");
  const int64_t c = input.dim(0), h = input.dim(1), w = input.dim(2);

  AffineParams params;
  for (int i = 0; i < 6; ++i) params.theta[static_cast<size_t>(i)] = static_cast<double>(theta.data()[static_cast<size_t>(i)]);
  SamplingGrid grid = generate_grid(params, out_h, out_w, static_cast<int>(h), static_cast<int>(w));

  Tensor y = Tensor::zeros({c, out_h, out_w});
  sample_kernel(input.data(), c, h, w, grid, &y.data(), nullptr, {});
  detail::check_finite(y, "affine_crop");

  if (tape.recording() && (input.requires_grad() || theta.requires_grad())) {
    auto xi = input.impl();
    auto ti = theta.impl();
    auto yi = y.impl();
    int id = tape.append_node([xi, ti, yi, grid, c, h, w, out_h, out_w] {
      if (yi->grad.empty()) return;
      SampleGrads g;
      std::vector<double> du, dv;
      g.want_input = xi->requires_grad;
      if (g.want_input) {
        detail::ensure_grad_buffer(*xi);
        g.dinput = &xi->grad;
      }
      g.want_coords = ti->requires_grad;
      if (g.want_coords) {
        du.assign(grid.u.size(), 0.0);
        dv.assign(grid.v.size(), 0.0);
        g.du = &du;
        g.dv = &dv;
      }
      sample_kernel(xi->data, c, h, w, grid, nullptr, &yi->grad, g);
      if (ti->requires_grad) {
        // Chain through u = t0*bux(j) + t1*buy(i) + half_w*(t2+1) and the
        // v analogue.
        const GridBasis basis = make_basis(out_h, out_w, static_cast<int>(h), static_cast<int>(w));
        std::array<double, 6> dt{};
        for (int i = 0; i < out_h; ++i)
          for (int j = 0; j < out_w; ++j) {
            const size_t idx = static_cast<size_t>(i) * out_w + j;
            dt[0] += du[idx] * basis.bux[static_cast<size_t>(j)];
            dt[1] += du[idx] * basis.buy[static_cast<size_t>(i)];
            dt[2] += du[idx] * basis.half_w;
            dt[3] += dv[idx] * basis.bvx[static_cast<size_t>(j)];
            dt[4] += dv[idx] * basis.bvy[static_cast<size_t>(i)];
            dt[5] += dv[idx] * basis.half_h;
          }
        detail::ensure_grad_buffer(*ti);
        for (int i = 0; i < 6; ++i) ti->grad[static_cast<size_t>(i)] += static_cast<scalar>(dt[static_cast<size_t>(i)]);
      }
    });
    yi->node = id;
    yi->tape = &tape;
    yi->requires_grad = true;
  }
  return y;
}

std::vector<BoundingBox> extract_boxes(const std::vector<SamplingGrid>& grids) {
  if (grids.empty()) throw ContractError("extract_boxes: no grids supplied");
  std::vector<BoundingBox> boxes;
  boxes.reserve(grids.size());
  for (const auto& g : grids) {
    BoundingBox b;
    const int last_i = g.out_h - 1, last_j = g.out_w - 1;
    b.corners[0] = {g.u_at(0, 0), g.v_at(0, 0)};
    b.corners[1] = {g.u_at(0, last_j), g.v_at(0, last_j)};
    b.corners[2] = {g.u_at(last_i, 0), g.v_at(last_i, 0)};
    b.corners[3] = {g.u_at(last_i, last_j), g.v_at(last_i, last_j)};
    boxes.push_back(b);
  }
  return boxes;
}

double mean_iou(const std::vector<BoundingBox>& predicted,
                const std::vector<std::array<double, 4>>& truth_xyxy) {
  if (predicted.empty() || predicted.size() != truth_xyxy.size()) return 0.0;
  double total = 0.0;
  for (size_t i = 0; i < predicted.size(); ++i) {
    const auto& p = predicted[i];
    const double px0 = p.min_x(), py0 = p.min_y(), px1 = p.max_x(), py1 = p.max_y();
    const auto& t = truth_xyxy[i];
    const double ix0 = std::max(px0, t[0]), iy0 = std::max(py0, t[1]);
    const double ix1 = std::min(px1, t[2]), iy1 = std::min(py1, t[3]);
    const double iw = std::max(0.0, ix1 - ix0), ih = std::max(0.0, iy1 - iy0);
    const double inter = iw * ih;
    const double pa = std::max(0.0, px1 - px0) * std::max(0.0, py1 - py0);
    const double ta = std::max(0.0, t[2] - t[0]) * std::max(0.0, t[3] - t[1]);
    const double uni = pa + ta - inter;
    total += uni > 0.0 ? inter / uni : 0.0;
  }
  return total / static_cast<double>(predicted.size());
}

}  // namespace spotter

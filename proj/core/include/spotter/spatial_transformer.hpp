#pragma once

#include <array>
#include <vector>

#include "spotter/tensor.hpp"

namespace spotter {

// One 2x3 affine matrix, row-major: (t0 t1 t2; t3 t4 t5), acting on
// normalized coordinates (x, y, 1) with x, y in [-1, 1].
struct AffineParams {
  std::array<double, 6> theta{1, 0, 0, 0, 1, 0};

  static AffineParams identity(double zoom = 1.0) {
    return AffineParams{{zoom, 0, 0, 0, zoom, 0}};
  }
  bool finite() const;
};

// Source coordinates, in input pixel space, for every output cell of one
// region. u is the horizontal (width) coordinate, v the vertical one.
// Coordinates are kept in double so corner/box geometry stays exact
// regardless of the build's arithmetic type.
struct SamplingGrid {
  int out_h = 0, out_w = 0;
  int in_h = 0, in_w = 0;
  int region_index = 0;
  std::vector<double> u, v;  // out_h * out_w each, row-major

  double u_at(int i, int j) const { return u[static_cast<size_t>(i) * out_w + j]; }
  double v_at(int i, int j) const { return v[static_cast<size_t>(i) * out_w + j]; }
};

// Four corners in input pixel space: top-left, top-right, bottom-left,
// bottom-right of the base grid. Each corner is (x, y).
struct BoundingBox {
  std::array<std::array<double, 2>, 4> corners{};

  double min_x() const;
  double min_y() const;
  double max_x() const;
  double max_y() const;
  bool axis_aligned() const;
};

// Maps the regular [-1,1]^2 base grid through the affine matrix and into
// pixel coordinates u in [0, in_w-1], v in [0, in_h-1] (corner-aligned).
// The identity transform reproduces the pixel lattice exactly when the
// output size equals the input size.
SamplingGrid generate_grid(const AffineParams& theta, int out_h, int out_w,
                           int in_h, int in_w);

// Bilinear interpolation of `input` (C x H x W) at the grid coordinates.
// Out-of-range coordinates contribute zero. Differentiable w.r.t. the input
// values; the grid is treated as constant.
Tensor bilinear_sample(Tape& tape, const Tensor& input, const SamplingGrid& grid);

// Fused grid generation + sampling with gradients flowing to both the input
// image and the six theta values. theta is a tensor of 6 elements.
Tensor affine_crop(Tape& tape, const Tensor& input, const Tensor& theta,
                   int out_h, int out_w);

std::vector<BoundingBox> extract_boxes(const std::vector<SamplingGrid>& grids);

// Mean intersection-over-union of the axis-aligned hulls of two box lists.
double mean_iou(const std::vector<BoundingBox>& predicted,
                const std::vector<std::array<double, 4>>& truth_xyxy);

}  // namespace spotter

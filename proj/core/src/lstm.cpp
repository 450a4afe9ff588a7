#include "spotter/lstm.hpp"

#include <cmath>

namespace spotter {

LstmState LstmState::zeros(Tape&, int64_t hidden) {
  LstmState s;
  s.h = Tensor::zeros({1, hidden});
  s.c = Tensor::zeros({1, hidden});
  return s;
}

LstmParams LstmParams::init(int64_t input_size, int64_t hidden, Rng& rng) {
  LstmParams p;
  p.input_size = input_size;
  p.hidden = hidden;
  const double sx = 1.0 / std::sqrt(static_cast<double>(input_size));
  const double sh = 1.0 / std::sqrt(static_cast<double>(hidden));
  std::vector<scalar> wx(static_cast<size_t>(input_size * 4 * hidden));
  std::vector<scalar> wh(static_cast<size_t>(hidden * 4 * hidden));
  for (auto& v : wx) v = static_cast<scalar>(rng.uniform(-sx, sx));
  for (auto& v : wh) v = static_cast<scalar>(rng.uniform(-sh, sh));
  std::vector<scalar> b(static_cast<size_t>(4 * hidden), scalar(0));
  // Forget-gate bias starts at 1 so early steps retain cell state.
  for (int64_t i = hidden; i < 2 * hidden; ++i) b[static_cast<size_t>(i)] = scalar(1);
  p.wx = Tensor::from_data({input_size, 4 * hidden}, std::move(wx)).set_requires_grad(true);
  p.wh = Tensor::from_data({hidden, 4 * hidden}, std::move(wh)).set_requires_grad(true);
  p.b = Tensor::from_data({4 * hidden}, std::move(b)).set_requires_grad(true);
  return p;
}

LstmState lstm_step(Tape& tape, const LstmParams& params, const Tensor& x,
                    const LstmState& state) {
  if (x.ndim() != 2 || x.dim(1) != params.input_size)
    throw ShapeError("lstm_step: input width does not match wx");
  if (state.h.dim(1) != params.hidden || state.c.dim(1) != params.hidden)
    throw ShapeError("lstm_step: state width does not match hidden size");

  const int64_t hdn = params.hidden;
  Tensor z = ops::add(tape, ops::matmul(tape, x, params.wx),
                      ops::matmul(tape, state.h, params.wh));
  z = ops::add_rowvec(tape, z, params.b);
  Tensor gi = ops::sigmoid(tape, ops::slice_cols(tape, z, 0, hdn));
  Tensor gf = ops::sigmoid(tape, ops::slice_cols(tape, z, hdn, 2 * hdn));
  Tensor gc = ops::tanh(tape, ops::slice_cols(tape, z, 2 * hdn, 3 * hdn));
  Tensor go = ops::sigmoid(tape, ops::slice_cols(tape, z, 3 * hdn, 4 * hdn));

  LstmState next;
  next.c = ops::add(tape, ops::mul(tape, gf, state.c), ops::mul(tape, gi, gc));
  next.h = ops::mul(tape, go, ops::tanh(tape, next.c));
  return next;
}

DenseParams DenseParams::init(int64_t in, int64_t out, Rng& rng) {
  DenseParams p;
  const double s = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<scalar> w(static_cast<size_t>(in * out));
  for (auto& v : w) v = static_cast<scalar>(rng.uniform(-s, s));
  p.w = Tensor::from_data({in, out}, std::move(w)).set_requires_grad(true);
  p.b = Tensor::zeros({out}).set_requires_grad(true);
  return p;
}

DenseParams DenseParams::zero_with_bias(int64_t in, const std::vector<scalar>& bias) {
  DenseParams p;
  p.w = Tensor::zeros({in, static_cast<int64_t>(bias.size())}).set_requires_grad(true);
  p.b = Tensor::from_data({static_cast<int64_t>(bias.size())}, bias).set_requires_grad(true);
  return p;
}

Tensor DenseParams::forward(Tape& tape, const Tensor& x) const {
  return ops::add_rowvec(tape, ops::matmul(tape, x, w), b);
}

std::vector<Tensor> predict_affine_sequence(Tape& tape, const Tensor& features,
                                            int n_regions,
                                            const LstmParams& forward_dir,
                                            const LstmParams& backward_dir,
                                            const DenseParams& head,
                                            bool rotation_skew_off) {
  if (n_regions < 1)
    throw ContractError("predict_affine_sequence: n_regions must be >= 1");

  // Every pseudo-timestep sees the same global feature vector; the
  // backward direction runs the same constant sequence and is aligned
  // step n <-> N-1-n, as in a standard BLSTM.
  std::vector<Tensor> fwd_h, bwd_h;
  fwd_h.reserve(static_cast<size_t>(n_regions));
  bwd_h.reserve(static_cast<size_t>(n_regions));
  LstmState sf = LstmState::zeros(tape, forward_dir.hidden);
  LstmState sb = LstmState::zeros(tape, backward_dir.hidden);
  for (int n = 0; n < n_regions; ++n) {
    sf = lstm_step(tape, forward_dir, features, sf);
    fwd_h.push_back(sf.h);
    sb = lstm_step(tape, backward_dir, features, sb);
    bwd_h.push_back(sb.h);
  }

  static const std::vector<scalar> kMask = {1, 0, 1, 0, 1, 1};
  std::vector<Tensor> thetas;
  thetas.reserve(static_cast<size_t>(n_regions));
  for (int n = 0; n < n_regions; ++n) {
    Tensor hcat = ops::concat_cols(tape, fwd_h[static_cast<size_t>(n)],
                                   bwd_h[static_cast<size_t>(n_regions - 1 - n)]);
    Tensor theta = head.forward(tape, hcat);
    if (rotation_skew_off) theta = ops::mul_mask(tape, theta, kMask);
    thetas.push_back(theta);
  }
  return thetas;
}

std::vector<AffineParams> predict_affine_values(const Tensor& features,
                                                int n_regions,
                                                const LstmParams& forward_dir,
                                                const LstmParams& backward_dir,
                                                const DenseParams& head,
                                                bool rotation_skew_off) {
  Tape tape;
  tape.set_recording(false);
  auto thetas = predict_affine_sequence(tape, features, n_regions, forward_dir,
                                        backward_dir, head, rotation_skew_off);
  std::vector<AffineParams> out;
  out.reserve(thetas.size());
  for (const auto& t : thetas) {
    AffineParams p;
    for (int i = 0; i < 6; ++i) p.theta[static_cast<size_t>(i)] = static_cast<double>(t.data()[static_cast<size_t>(i)]);
    out.push_back(p);
  }
  return out;
}

}  // namespace spotter

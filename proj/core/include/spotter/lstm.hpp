#pragma once

#include <vector>

#include "spotter/ops.hpp"
#include "spotter/rng.hpp"
#include "spotter/spatial_transformer.hpp"
#include "spotter/tensor.hpp"

namespace spotter {

// Hidden and cell state, each 1 x hidden.
struct LstmState {
  Tensor h, c;

  static LstmState zeros(Tape& tape, int64_t hidden);
};

// One direction of an LSTM. Gates are packed [input, forget, candidate,
// output] along the columns of wx/wh/b.
struct LstmParams {
  Tensor wx;  // input_size x 4*hidden
  Tensor wh;  // hidden x 4*hidden
  Tensor b;   // 4*hidden
  int64_t input_size = 0;
  int64_t hidden = 0;

  static LstmParams init(int64_t input_size, int64_t hidden, Rng& rng);
};

LstmState lstm_step(Tape& tape, const LstmParams& params, const Tensor& x,
                    const LstmState& state);

// Dense layer y = x * w + b.
struct DenseParams {
  Tensor w;  // in x out
  Tensor b;  // out

  static DenseParams init(int64_t in, int64_t out, Rng& rng);
  static DenseParams zero_with_bias(int64_t in, const std::vector<scalar>& bias);
  Tensor forward(Tape& tape, const Tensor& x) const;
};

// Runs the bidirectional recurrence over n_regions pseudo-timesteps, feeding
// the same global feature vector to every step, and maps each concatenated
// hidden state through the shared 6-way dense head. With the rotation/skew
// constraint active the theta_2 and theta_4 outputs are forced to exactly 0.
// Returns one 1x6 theta tensor per region.
std::vector<Tensor> predict_affine_sequence(Tape& tape, const Tensor& features,
                                            int n_regions,
                                            const LstmParams& forward_dir,
                                            const LstmParams& backward_dir,
                                            const DenseParams& head,
                                            bool rotation_skew_off);

// Value-level convenience used by diagnostics and tests.
std::vector<AffineParams> predict_affine_values(const Tensor& features,
                                                int n_regions,
                                                const LstmParams& forward_dir,
                                                const LstmParams& backward_dir,
                                                const DenseParams& head,
                                                bool rotation_skew_off);

}  // namespace spotter

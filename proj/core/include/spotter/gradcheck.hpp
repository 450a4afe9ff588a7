#pragma once

#include <functional>
#include <string>
#include <vector>

#include "spotter/rng.hpp"
#include "spotter/tensor.hpp"

namespace spotter {
namespace gradcheck {

// Central-difference step and pass tolerance for this build's arithmetic
// type: 1e-3/1e-3 at 32 bit, 1e-6/1e-6 at 64 bit.
double fd_step();
double tolerance();

struct Report {
  std::string op;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  int instances = 0;
  bool pass = false;
};

// Compares tape gradients of a scalar loss against central finite
// differences over every component of every leaf (or `component_cap` random
// components per leaf when positive). `build` must reconstruct the loss from
// the leaves' current data on the given tape; it is invoked once recording
// and twice more per probed component with recording off.
// Relative error: |a - f| / max(1, |a|, |f|).
//
// With `deep_loss` set (used for whole-network composites) two guards are
// added, both still built purely from forward evaluations:
//  - gate filter: probes that flip any relu gate, pooling argmax or sampler
//    cell between evaluations straddle a kink and are skipped, since no
//    finite difference estimates anything there;
//  - Richardson extrapolation of the central differences at step and step/2,
//    cancelling the h^2 truncation term that a stiff log-loss can push past
//    the pass tolerance.
// A genuinely wrong analytic gradient still fails: the extrapolated fd
// converges to the true derivative, not to the tape's answer.
double max_fd_rel_err(const std::function<Tensor(Tape&)>& build,
                      const std::vector<Tensor>& leaves, double step,
                      int component_cap, Rng& rng, bool deep_loss = false);

// Named checks, each running `instances` randomized instances.
std::vector<std::string> check_names();
Report run_check(const std::string& name, uint64_t seed, int instances);
// Empty filter runs everything; otherwise only ops whose name contains it.
std::vector<Report> run_all(uint64_t seed, int instances, const std::string& filter = "");

}  // namespace gradcheck
}  // namespace spotter

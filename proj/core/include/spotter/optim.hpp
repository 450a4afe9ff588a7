#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "spotter/model.hpp"

namespace spotter {

enum class OptKind { Sgd, Adam };

OptKind opt_kind_from_string(const std::string& s);
std::string to_string(OptKind k);

struct OptimizerConfig {
  OptKind kind = OptKind::Sgd;
  scalar lr = scalar(0.01);
  scalar momentum = scalar(0.9);
  scalar beta1 = scalar(0.9);
  scalar beta2 = scalar(0.999);
  scalar eps = scalar(1e-8);
  scalar clip_norm = scalar(10.0);  // global-norm clip; 0 disables

  void validate() const;
};

// Classical momentum: v <- mu*v - lr*g; p <- p + v.
void sgd_update(std::vector<scalar>& p, const std::vector<scalar>& g,
                std::vector<scalar>& velocity, scalar lr, scalar momentum);

// Bias-corrected update from the cited derivation; step_t is 1-based.
void adam_update(std::vector<scalar>& p, const std::vector<scalar>& g,
                 std::vector<scalar>& m, std::vector<scalar>& v, int64_t step_t,
                 scalar lr, scalar beta1, scalar beta2, scalar eps);

// Owns per-parameter state buffers keyed by parameter name. Parameters are
// addressed in visit_params order.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg);

  const OptimizerConfig& config() const { return cfg_; }
  void set_lr(scalar lr) { cfg_.lr = lr; }
  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }

  // Applies one update from gradients aligned with the model's visit_params
  // order. Throws DivergenceError naming the parameter on non-finite
  // gradients. Gradients are clipped (jointly, by global norm) in place.
  void step(TextSpotter& model, std::vector<std::vector<scalar>>& grads);

  // State buffers for checkpointing: "<prefix>.<param name>" with prefix
  // "vel" (sgd) or "m"/"v" (adam).
  void visit_state(const std::function<void(const std::string&, std::vector<scalar>&)>& fn);
  void visit_state(
      const std::function<void(const std::string&, const std::vector<scalar>&)>& fn) const;
  // Installs a buffer loaded from a checkpoint.
  void set_state(const std::string& key, std::vector<scalar> values);

 private:
  std::vector<scalar>& buffer(const std::string& key, size_t size);
  OptimizerConfig cfg_;
  int64_t step_ = 0;
  std::unordered_map<std::string, std::vector<scalar>> state_;
};

}  // namespace spotter

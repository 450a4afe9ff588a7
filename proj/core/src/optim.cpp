#include "spotter/optim.hpp"

#include <algorithm>
#include <cmath>

namespace spotter {

OptKind opt_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptKind::Sgd;
  if (s == "adam") return OptKind::Adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

std::string to_string(OptKind k) { return k == OptKind::Sgd ? "sgd" : "adam"; }

void OptimizerConfig::validate() const {
  if (!(lr > scalar(0))) throw ContractError("optimizer: learning rate must be > 0");
  if (momentum < scalar(0) || momentum >= scalar(1))
    throw ContractError("optimizer: momentum must be in [0, 1)");
  if (clip_norm < scalar(0)) throw ContractError("optimizer: clip_norm must be >= 0");
}

void sgd_update(std::vector<scalar>& p, const std::vector<scalar>& g,
                std::vector<scalar>& velocity, scalar lr, scalar momentum) {
  if (p.size() != g.size() || p.size() != velocity.size())
    throw ShapeError("sgd_update: buffer sizes disagree");
  for (size_t i = 0; i < p.size(); ++i) {
    velocity[i] = momentum * velocity[i] - lr * g[i];
    p[i] += velocity[i];
  }
}

void adam_update(std::vector<scalar>& p, const std::vector<scalar>& g,
                 std::vector<scalar>& m, std::vector<scalar>& v, int64_t step_t,
                 scalar lr, scalar beta1, scalar beta2, scalar eps) {
  if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size())
    throw ShapeError("adam_update: buffer sizes disagree");
  const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(step_t));
  const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(step_t));
  for (size_t i = 0; i < p.size(); ++i) {
    m[i] = beta1 * m[i] + (scalar(1) - beta1) * g[i];
    v[i] = beta2 * v[i] + (scalar(1) - beta2) * g[i] * g[i];
    const double mhat = static_cast<double>(m[i]) / bc1;
    const double vhat = static_cast<double>(v[i]) / bc2;
    p[i] -= static_cast<scalar>(static_cast<double>(lr) * mhat /
                                (std::sqrt(vhat) + static_cast<double>(eps)));
  }
}

Optimizer::Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

std::vector<scalar>& Optimizer::buffer(const std::string& key, size_t size) {
  auto it = state_.find(key);
  if (it == state_.end())
    it = state_.emplace(key, std::vector<scalar>(size, scalar(0))).first;
  else if (it->second.size() != size)
    throw ShapeError("optimizer state '" + key + "' has the wrong size");
  return it->second;
}

void Optimizer::step(TextSpotter& model, std::vector<std::vector<scalar>>& grads) {
  std::vector<std::pair<std::string, Tensor*>> params;
  model.visit_params([&params](const std::string& name, Tensor& t) {
    params.emplace_back(name, &t);
  });
  if (params.size() != grads.size())
    throw ShapeError("optimizer step: gradient list does not match parameter list");

  for (size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].second->data().size())
      throw ShapeError("optimizer step: gradient size mismatch for " + params[i].first);
    for (scalar g : grads[i])
      if (!std::isfinite(static_cast<double>(g)))
        throw DivergenceError("non-finite gradient in parameter " + params[i].first);
  }

  if (cfg_.clip_norm > scalar(0)) {
    double sq = 0.0;
    for (const auto& g : grads)
      for (scalar v : g) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    if (norm > static_cast<double>(cfg_.clip_norm)) {
      const scalar f = static_cast<scalar>(static_cast<double>(cfg_.clip_norm) / norm);
      for (auto& g : grads)
        for (auto& v : g) v *= f;
    }
  }

  ++step_;
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].second->data();
    if (cfg_.kind == OptKind::Sgd) {
      sgd_update(p, grads[i], buffer("vel." + params[i].first, p.size()), cfg_.lr,
                 cfg_.momentum);
    } else {
      adam_update(p, grads[i], buffer("m." + params[i].first, p.size()),
                  buffer("v." + params[i].first, p.size()), step_, cfg_.lr,
                  cfg_.beta1, cfg_.beta2, cfg_.eps);
    }
  }
}

void Optimizer::visit_state(
    const std::function<void(const std::string&, std::vector<scalar>&)>& fn) {
  std::vector<std::string> keys;
  keys.reserve(state_.size());
  for (auto& kv : state_) keys.push_back(kv.first);
  std::sort(keys.begin(), keys.end());
  for (const auto& k : keys) fn(k, state_[k]);
}

void Optimizer::visit_state(
    const std::function<void(const std::string&, const std::vector<scalar>&)>& fn) const {
  auto* self = const_cast<Optimizer*>(this);
  self->visit_state([&fn](const std::string& n, std::vector<scalar>& s) { fn(n, s); });
}

void Optimizer::set_state(const std::string& key, std::vector<scalar> values) {
  state_[key] = std::move(values);
}

}  // namespace spotter

#include "spotter/recognition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "spotter/ops.hpp"

namespace spotter {

namespace {

constexpr double kLogZero = -std::numeric_limits<double>::infinity();

double log_sum_exp(double a, double b) {
  if (a == kLogZero) return b;
  if (b == kLogZero) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double log_sum_exp(double a, double b, double c) {
  return log_sum_exp(log_sum_exp(a, b), c);
}

}  // namespace

Alphabet::Alphabet(std::string symbols) : symbols_(std::move(symbols)) {
  lookup_.assign(256, -1);
  for (size_t i = 0; i < symbols_.size(); ++i) {
    const auto uc = static_cast<unsigned char>(symbols_[i]);
    if (lookup_[uc] != -1)
      throw ContractError(std::string("Alphabet: duplicate symbol '") + symbols_[i] + "'");
    lookup_[uc] = static_cast<int>(i) + 1;
  }
}

int Alphabet::class_of(char c) const {
  const int cls = lookup_.empty() ? -1 : lookup_[static_cast<unsigned char>(c)];
  if (cls < 0) throw ContractError(std::string("Alphabet: symbol '") + c + "' not in alphabet");
  return cls;
}

char Alphabet::symbol_of(int cls) const {
  if (cls < 1 || cls >= num_classes())
    throw ContractError("Alphabet: class index out of range");
  return symbols_[static_cast<size_t>(cls) - 1];
}

std::vector<int> Alphabet::encode(const std::string& text) const {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(class_of(c));
  return out;
}

std::string Alphabet::decode(const std::vector<int>& classes) const {
  std::string out;
  for (int cls : classes) {
    if (cls == blank()) continue;
    out.push_back(symbol_of(cls));
  }
  return out;
}

std::vector<int> collapse_path(const std::vector<int>& path, int num_classes) {
  std::vector<int> out;
  int prev = -1;
  for (int v : path) {
    if (v < 0 || v >= num_classes)
      throw ContractError("collapse_path: symbol outside the blank-augmented alphabet");
    if (v != prev && v != 0) out.push_back(v);
    prev = v;
  }
  return out;
}

std::vector<int> best_path_raw(const Tensor& logits) {
  if (logits.ndim() != 2) throw ShapeError("best_path_decode: logits must be T x K");
  const int64_t t = logits.dim(0), k = logits.dim(1);
  std::vector<int> path(static_cast<size_t>(t));
  for (int64_t r = 0; r < t; ++r) {
    const scalar* row = logits.ptr() + r * k;
    int arg = 0;
    for (int64_t i = 1; i < k; ++i)
      if (row[i] > row[arg]) arg = static_cast<int>(i);
    path[static_cast<size_t>(r)] = arg;
  }
  return path;
}

std::vector<int> best_path_decode(const Tensor& logits) {
  return collapse_path(best_path_raw(logits), static_cast<int>(logits.dim(1)));
}

int64_t ctc_min_timesteps(const std::vector<int>& target) {
  int64_t repeats = 0;
  for (size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++repeats;
  return static_cast<int64_t>(target.size()) + repeats;
}

Tensor ctc_loss(Tape& tape, const Tensor& logits, const std::vector<int>& target) {
  if (logits.ndim() != 2) throw ShapeError("ctc_loss: logits must be T x K");
  const int64_t t_len = logits.dim(0), k = logits.dim(1);
  for (int v : target)
    if (v <= 0 || v >= k)
      throw ContractError("ctc_loss: target classes must be non-blank and in range");
  if (ctc_min_timesteps(target) > t_len)
    throw CtcInfeasibleError("ctc_loss: target of length " + std::to_string(target.size()) +
                             " (+repeats) cannot fit in " + std::to_string(t_len) +
                             " timesteps");

  // Log-softmax per row, in double.
  std::vector<double> lp(static_cast<size_t>(t_len * k));
  std::vector<double> probs(static_cast<size_t>(t_len * k));
  for (int64_t t = 0; t < t_len; ++t) {
    const scalar* row = logits.ptr() + t * k;
    double mx = static_cast<double>(row[0]);
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, static_cast<double>(row[i]));
    double denom = 0.0;
    for (int64_t i = 0; i < k; ++i) denom += std::exp(static_cast<double>(row[i]) - mx);
    const double lse = std::log(denom) + mx;
    for (int64_t i = 0; i < k; ++i) {
      lp[static_cast<size_t>(t * k + i)] = static_cast<double>(row[i]) - lse;
      probs[static_cast<size_t>(t * k + i)] = std::exp(lp[static_cast<size_t>(t * k + i)]);
    }
  }

  // Blank-augmented label sequence: blank, l1, blank, l2, ..., blank.
  const int64_t s_len = 2 * static_cast<int64_t>(target.size()) + 1;
  std::vector<int> lab(static_cast<size_t>(s_len), 0);
  for (size_t i = 0; i < target.size(); ++i) lab[2 * i + 1] = target[i];

  auto allow_skip = [&](int64_t s) {
    return s >= 2 && lab[static_cast<size_t>(s)] != 0 &&
           lab[static_cast<size_t>(s)] != lab[static_cast<size_t>(s - 2)];
  };

  std::vector<double> alpha(static_cast<size_t>(t_len * s_len), kLogZero);
  alpha[0] = lp[0];  // blank at t=0
  if (s_len > 1) alpha[1] = lp[static_cast<size_t>(lab[1])];
  for (int64_t t = 1; t < t_len; ++t)
    for (int64_t s = 0; s < s_len; ++s) {
      double a = alpha[static_cast<size_t>((t - 1) * s_len + s)];
      if (s >= 1) a = log_sum_exp(a, alpha[static_cast<size_t>((t - 1) * s_len + s - 1)]);
      if (allow_skip(s)) a = log_sum_exp(a, alpha[static_cast<size_t>((t - 1) * s_len + s - 2)]);
      alpha[static_cast<size_t>(t * s_len + s)] =
          a + lp[static_cast<size_t>(t * k + lab[static_cast<size_t>(s)])];
    }

  double log_z = alpha[static_cast<size_t>((t_len - 1) * s_len + s_len - 1)];
  if (s_len > 1)
    log_z = log_sum_exp(log_z, alpha[static_cast<size_t>((t_len - 1) * s_len + s_len - 2)]);

  Tensor loss = Tensor::scalar_of(static_cast<scalar>(-log_z));

  if (tape.recording() && logits.requires_grad()) {
    // Beta pass and posteriors only happen if someone will backprop.
    std::vector<double> beta(static_cast<size_t>(t_len * s_len), kLogZero);
    beta[static_cast<size_t>((t_len - 1) * s_len + s_len - 1)] =
        lp[static_cast<size_t>((t_len - 1) * k + lab[static_cast<size_t>(s_len - 1)])];
    if (s_len > 1)
      beta[static_cast<size_t>((t_len - 1) * s_len + s_len - 2)] =
          lp[static_cast<size_t>((t_len - 1) * k + lab[static_cast<size_t>(s_len - 2)])];
    for (int64_t t = t_len - 2; t >= 0; --t)
      for (int64_t s = s_len - 1; s >= 0; --s) {
        double b = beta[static_cast<size_t>((t + 1) * s_len + s)];
        if (s + 1 < s_len) b = log_sum_exp(b, beta[static_cast<size_t>((t + 1) * s_len + s + 1)]);
        if (s + 2 < s_len && allow_skip(s + 2))
          b = log_sum_exp(b, beta[static_cast<size_t>((t + 1) * s_len + s + 2)]);
        beta[static_cast<size_t>(t * s_len + s)] =
            b + lp[static_cast<size_t>(t * k + lab[static_cast<size_t>(s)])];
      }

    // gamma[t][class] = total posterior mass of states emitting that class.
    std::vector<double> gamma(static_cast<size_t>(t_len * k), 0.0);
    for (int64_t t = 0; t < t_len; ++t)
      for (int64_t s = 0; s < s_len; ++s) {
        const double a = alpha[static_cast<size_t>(t * s_len + s)];
        const double b = beta[static_cast<size_t>(t * s_len + s)];
        if (a == kLogZero || b == kLogZero) continue;
        const double emit = lp[static_cast<size_t>(t * k + lab[static_cast<size_t>(s)])];
        gamma[static_cast<size_t>(t * k + lab[static_cast<size_t>(s)])] +=
            std::exp(a + b - emit - log_z);
      }

    auto li = logits.impl();
    auto yi = loss.impl();
    int id = tape.append_node([li, yi, probs = std::move(probs),
                               gamma = std::move(gamma), t_len, k] {
      if (yi->grad.empty() || !li->requires_grad) return;
      detail::ensure_grad_buffer(*li);
      const double g = static_cast<double>(yi->grad[0]);
      for (int64_t i = 0; i < t_len * k; ++i)
        li->grad[static_cast<size_t>(i)] += static_cast<scalar>(
            g * (probs[static_cast<size_t>(i)] - gamma[static_cast<size_t>(i)]));
    });
    yi->node = id;
    yi->tape = &tape;
    yi->requires_grad = true;
  }
  return loss;
}

std::vector<int> pad_with_blank(const std::vector<int>& target, int timesteps) {
  if (static_cast<int>(target.size()) > timesteps)
    throw ContractError("target of length " + std::to_string(target.size()) +
                        " exceeds the " + std::to_string(timesteps) +
                        " classifier positions");
  std::vector<int> padded = target;
  padded.resize(static_cast<size_t>(timesteps), 0);
  return padded;
}

Tensor ensemble_loss(Tape& tape, const Tensor& logits,
                     const std::vector<int>& target_no_blanks, int timesteps,
                     std::vector<int>* predictions) {
  if (logits.ndim() != 2 || logits.dim(0) != timesteps)
    throw ShapeError("ensemble_loss: logits must be timesteps x classes");
  const std::vector<int> padded = pad_with_blank(target_no_blanks, timesteps);
  if (predictions != nullptr) *predictions = best_path_raw(logits);
  return ops::softmax_cross_entropy(tape, logits, padded);
}

int64_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int64_t> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int64_t>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int64_t>(i);
    for (size_t j = 1; j <= m; ++j) {
      const int64_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

}  // namespace spotter

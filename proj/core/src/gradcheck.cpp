#include "spotter/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "spotter/lstm.hpp"
#include "spotter/model.hpp"
#include "spotter/ops.hpp"
#include "spotter/recognition.hpp"
#include "spotter/spatial_transformer.hpp"

namespace spotter {
namespace gradcheck {

double fd_step() { return kScalarIsDouble ? 1e-6 : 1e-3; }
double tolerance() { return kScalarIsDouble ? 1e-6 : 1e-3; }

double max_fd_rel_err(const std::function<Tensor(Tape&)>& build,
                      const std::vector<Tensor>& leaves, double step,
                      int component_cap, Rng& rng, bool deep_loss) {
  for (auto leaf : leaves) leaf.set_requires_grad(true);

  Tape tape;
  Tensor loss = build(tape);
  tape.backward(loss);
  std::vector<std::vector<scalar>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves)
    analytic.push_back(leaf.has_grad() ? leaf.grad()
                                       : std::vector<scalar>(leaf.data().size(), scalar(0)));

  auto eval_loss = [&build, deep_loss](uint64_t* signature) {
    Tape t;
    t.set_recording(false);
    if (deep_loss) {
      *signature = 0;
      detail::set_gate_signature(signature);
    }
    const double loss = static_cast<double>(build(t).item());
    if (deep_loss) detail::set_gate_signature(nullptr);
    return loss;
  };

  uint64_t sig_center = 0;
  if (deep_loss) eval_loss(&sig_center);

  // A deep 32-bit composite carries ~10 ulps of forward rounding noise on the
  // loss; at the standard probe step that noise alone reaches the pass
  // tolerance. Composite probes therefore widen the step (noise ~ 1/h) and
  // cancel the reintroduced h^2 truncation with a second difference at 2h.
  // The per-op checks keep the standard step.
  if (deep_loss && !kScalarIsDouble) step = 4e-3;

  double worst = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li];
    std::vector<int64_t> indices;
    const int64_t n = leaf.numel();
    if (component_cap > 0 && n > component_cap) {
      std::vector<int64_t> all(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      rng.shuffle(all.begin(), all.end());
      indices.assign(all.begin(), all.begin() + component_cap);
    } else {
      indices.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) indices[static_cast<size_t>(i)] = i;
    }
    for (int64_t idx : indices) {
      const scalar saved = leaf.data()[static_cast<size_t>(idx)];
      bool crossed_kink = false;
      auto fd_at = [&](double h) {
        uint64_t sig_up = 0, sig_down = 0;
        leaf.data()[static_cast<size_t>(idx)] = saved + static_cast<scalar>(h);
        const double up = eval_loss(&sig_up);
        leaf.data()[static_cast<size_t>(idx)] = saved - static_cast<scalar>(h);
        const double down = eval_loss(&sig_down);
        leaf.data()[static_cast<size_t>(idx)] = saved;
        if (deep_loss && (sig_up != sig_center || sig_down != sig_center))
          crossed_kink = true;
        return (up - down) / (2.0 * h);
      };
      double fd = fd_at(step);
      if (deep_loss && !crossed_kink)
        fd = (4.0 * fd - fd_at(2.0 * step)) / 3.0;
      // A probe that flips any relu gate, pooling argmax or sampler cell
      // straddles a kink: its central difference estimates nothing.
      if (crossed_kink) continue;
      const double an = static_cast<double>(analytic[li][static_cast<size_t>(idx)]);
      const double rel = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<scalar> data(static_cast<size_t>(n));
  for (auto& v : data) v = static_cast<scalar>(rng.uniform(lo, hi));
  return Tensor::from_data(std::move(shape), std::move(data));
}

std::vector<scalar> random_weights(int64_t n, Rng& rng) {
  std::vector<scalar> w(static_cast<size_t>(n));
  for (auto& v : w) v = static_cast<scalar>(rng.uniform(-1.0, 1.0));
  return w;
}

// Weighted sum keeps reductions sensitive to every output component.
Tensor weighted_sum(Tape& tape, const Tensor& y, const std::vector<scalar>& w) {
  return ops::sum(tape, ops::mul_mask(tape, y, w));
}

using InstanceFn = std::function<double(Rng&)>;

double check_matmul(Rng& rng) {
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  const auto w = random_weights(6, rng);
  return max_fd_rel_err(
      [&](Tape& t) { return weighted_sum(t, ops::matmul(t, a, b), w); }, {a, b},
      fd_step(), 0, rng);
}

double check_conv2d(Rng& rng) {
  Tensor x = random_tensor({2, 5, 5}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  const auto w = random_weights(3 * 5 * 5, rng);
  return max_fd_rel_err(
      [&](Tape& t) { return weighted_sum(t, ops::conv2d(t, x, k, 1, 1), w); }, {x, k},
      fd_step(), 0, rng);
}

double check_pool_avg(Rng& rng) {
  Tensor x = random_tensor({1, 4, 4}, rng);
  const auto w = random_weights(1 * 2 * 2, rng);
  return max_fd_rel_err(
      [&](Tape& t) {
        return weighted_sum(t, ops::pool(t, x, ops::PoolKind::Avg, 2, 2), w);
      },
      {x}, fd_step(), 0, rng);
}

double check_pool_max(Rng& rng) {
  // Well-separated shuffled levels keep every window free of near-ties, so
  // the perturbation cannot flip an argmax.
  std::vector<scalar> values(32);
  for (size_t i = 0; i < values.size(); ++i)
    values[i] = static_cast<scalar>(0.05 * static_cast<double>(i) +
                                    rng.uniform(-0.01, 0.01));
  rng.shuffle(values.begin(), values.end());
  Tensor x = Tensor::from_data({2, 4, 4}, values);
  const auto w = random_weights(2 * 2 * 2, rng);
  return max_fd_rel_err(
      [&](Tape& t) {
        return weighted_sum(t, ops::pool(t, x, ops::PoolKind::Max, 2, 2), w);
      },
      {x}, fd_step(), 0, rng);
}

double check_batch_norm(Rng& rng) {
  Tensor x = random_tensor({3, 2, 3, 3}, rng);
  Tensor gamma = random_tensor({2}, rng, 0.5, 1.5);
  Tensor beta = random_tensor({2}, rng, -0.5, 0.5);
  const auto w = random_weights(x.numel(), rng);
  RunningStats rs;
  rs.init(2);
  return max_fd_rel_err(
      [&](Tape& t) {
        BnObserver obs;  // keep running stats untouched across fd evals
        return weighted_sum(t, ops::batch_norm(t, x, gamma, beta, Mode::Train, rs, &obs), w);
      },
      {x, gamma, beta}, fd_step(), 0, rng);
}

double check_relu(Rng& rng) {
  Tensor x = random_tensor({12}, rng);
  // Stay clear of the kink at zero.
  for (auto& v : x.data())
    if (std::abs(static_cast<double>(v)) < 8.0 * fd_step())
      v += static_cast<scalar>(v >= scalar(0) ? 0.1 : -0.1);
  const auto w = random_weights(12, rng);
  return max_fd_rel_err([&](Tape& t) { return weighted_sum(t, ops::relu(t, x), w); },
                        {x}, fd_step(), 0, rng);
}

double check_sigmoid(Rng& rng) {
  Tensor x = random_tensor({10}, rng, -2.0, 2.0);
  const auto w = random_weights(10, rng);
  return max_fd_rel_err([&](Tape& t) { return weighted_sum(t, ops::sigmoid(t, x), w); },
                        {x}, fd_step(), 0, rng);
}

double check_tanh(Rng& rng) {
  Tensor x = random_tensor({10}, rng, -2.0, 2.0);
  const auto w = random_weights(10, rng);
  return max_fd_rel_err([&](Tape& t) { return weighted_sum(t, ops::tanh(t, x), w); },
                        {x}, fd_step(), 0, rng);
}

double check_softmax(Rng& rng) {
  Tensor x = random_tensor({2, 5}, rng, -2.0, 2.0);
  const auto w = random_weights(10, rng);
  return max_fd_rel_err([&](Tape& t) { return weighted_sum(t, ops::softmax(t, x), w); },
                        {x}, fd_step(), 0, rng);
}

double check_cross_entropy(Rng& rng) {
  Tensor x = random_tensor({3, 6}, rng, -1.5, 1.5);
  std::vector<int> targets = {static_cast<int>(rng.randint(0, 5)),
                              static_cast<int>(rng.randint(0, 5)),
                              static_cast<int>(rng.randint(0, 5))};
  return max_fd_rel_err(
      [&](Tape& t) { return ops::softmax_cross_entropy(t, x, targets); }, {x},
      fd_step(), 0, rng);
}

double check_lstm_step(Rng& rng) {
  const int64_t in = 4, hidden = 5;
  Rng init_rng(rng.next_u64());
  LstmParams params = LstmParams::init(in, hidden, init_rng);
  Tensor x = random_tensor({1, in}, rng);
  const auto w = random_weights(hidden, rng);
  // Three chained steps with the same input: gradients flow through time.
  return max_fd_rel_err(
      [&](Tape& t) {
        LstmState s = LstmState::zeros(t, hidden);
        for (int i = 0; i < 3; ++i) s = lstm_step(t, params, x, s);
        return weighted_sum(t, s.h, w);
      },
      {x, params.wx, params.wh, params.b}, fd_step(), 0, rng);
}

double check_bilinear_sample(Rng& rng) {
  Tensor img = random_tensor({3, 8, 8}, rng, 0.0, 1.0);
  AffineParams theta;
  theta.theta = {rng.uniform(0.5, 0.8), 0.0, rng.uniform(-0.1, 0.1),
                 0.0, rng.uniform(0.5, 0.8), rng.uniform(-0.1, 0.1)};
  const SamplingGrid grid = generate_grid(theta, 5, 5, 8, 8);
  const auto w = random_weights(3 * 5 * 5, rng);
  return max_fd_rel_err(
      [&](Tape& t) { return weighted_sum(t, bilinear_sample(t, img, grid), w); }, {img},
      fd_step(), 0, rng);
}

double check_affine_crop_theta(Rng& rng) {
  Tensor img = random_tensor({3, 8, 8}, rng, 0.0, 1.0);
  // Sample theta away from configurations that put grid points on the
  // integer lattice, where the interpolation kernel has kinks.
  Tensor theta;
  for (int tries = 0; tries < 200; ++tries) {
    std::vector<scalar> tv = {static_cast<scalar>(rng.uniform(0.45, 0.8)), 0,
                              static_cast<scalar>(rng.uniform(-0.15, 0.15)), 0,
                              static_cast<scalar>(rng.uniform(0.45, 0.8)),
                              static_cast<scalar>(rng.uniform(-0.15, 0.15))};
    theta = Tensor::from_data({1, 6}, tv);
    AffineParams p;
    for (int i = 0; i < 6; ++i) p.theta[static_cast<size_t>(i)] = static_cast<double>(tv[static_cast<size_t>(i)]);
    const SamplingGrid g = generate_grid(p, 5, 5, 8, 8);
    double min_dist = 1.0;
    for (double u : g.u) min_dist = std::min(min_dist, std::abs(u - std::round(u)));
    for (double v : g.v) min_dist = std::min(min_dist, std::abs(v - std::round(v)));
    if (min_dist > 50.0 * fd_step()) break;
  }
  const auto w = random_weights(3 * 5 * 5, rng);
  return max_fd_rel_err(
      [&](Tape& t) { return weighted_sum(t, affine_crop(t, img, theta, 5, 5), w); },
      {img, theta}, fd_step(), 0, rng);
}

double check_ctc_loss(Rng& rng) {
  const int64_t t_len = 5, k = 4;
  Tensor logits = random_tensor({t_len, k}, rng, -1.5, 1.5);
  std::vector<int> target;
  const int len = static_cast<int>(rng.randint(1, 2));
  for (int i = 0; i < len; ++i) target.push_back(static_cast<int>(rng.randint(1, k - 1)));
  return max_fd_rel_err([&](Tape& t) { return ctc_loss(t, logits, target); }, {logits},
                        fd_step(), 0, rng);
}

double check_global_avg_pool(Rng& rng) {
  Tensor x = random_tensor({3, 4, 4}, rng);
  const auto w = random_weights(3, rng);
  return max_fd_rel_err(
      [&](Tape& t) { return weighted_sum(t, ops::global_avg_pool(t, x), w); }, {x},
      fd_step(), 0, rng);
}

double check_columns_over_width(Rng& rng) {
  Tensor x = random_tensor({3, 4, 5}, rng);
  const auto w = random_weights(5 * 3, rng);
  return max_fd_rel_err(
      [&](Tape& t) { return weighted_sum(t, ops::columns_over_width(t, x), w); }, {x},
      fd_step(), 0, rng);
}

ModelConfig tiny_config(HeadKind head) {
  ModelConfig cfg;
  cfg.n_regions = 2;
  cfg.timesteps = 2;
  cfg.alphabet = "0123";
  cfg.head = head;
  cfg.loc_filters = {4, 6, 6};
  cfg.rec_filters = {4, 6, 8};
  cfg.blstm_hidden = 6;
  cfg.region_h = 8;
  cfg.region_w = 8;
  cfg.input_h = 16;
  cfg.input_w = 16;
  return cfg;
}

double check_composite(Rng& rng, HeadKind head) {
  Rng init_rng(rng.next_u64());
  TextSpotter model = TextSpotter::build(tiny_config(head), init_rng);
  // Non-zero head weights exercise the full localisation gradient path.
  for (auto& v : model.localization().head.w.data())
    v = static_cast<scalar>(rng.uniform(-0.05, 0.05));
  // Keep classifier logits tempered. Confidently wrong random classifiers put
  // the log loss in a stiff regime where the h^2 truncation of a central
  // difference alone exceeds the pass tolerance (verified against the
  // double build); the gradient is checked at a well-conditioned point.
  if (head == HeadKind::Ctc) {
    for (auto& v : model.recognition().ctc_head.w.data()) v *= scalar(0.1);
  } else {
    for (auto& h : model.recognition().ensemble_heads)
      for (auto& v : h.w.data()) v *= scalar(0.3);
  }

  Tensor image = random_tensor({1, 16, 16}, rng, 0.0, 1.0);
  // The ctc head sees only two feature columns at this region size, so the
  // target must fit without blank-separated repeats.
  std::vector<std::vector<int>> targets;
  for (int n = 0; n < 2; ++n) {
    std::vector<int> tgt;
    const int len = static_cast<int>(rng.randint(1, 2));
    for (int i = 0; i < len; ++i) {
      int sym = static_cast<int>(rng.randint(1, 4));
      while (head == HeadKind::Ctc && !tgt.empty() && sym == tgt.back())
        sym = static_cast<int>(rng.randint(1, 4));
      tgt.push_back(sym);
    }
    targets.push_back(tgt);
  }

  std::vector<Tensor> leaves = {image};
  model.visit_params([&leaves](const std::string&, Tensor& t) { leaves.push_back(t); });

  return max_fd_rel_err(
      [&](Tape& t) {
        BnObserver obs;
        const ForwardResult fr = model.forward(t, image, Mode::Train, &obs);
        return model.loss(t, fr, targets);
      },
      leaves, fd_step(), 4, rng, /*deep_loss=*/true);
}

const std::vector<std::pair<std::string, InstanceFn>>& registry() {
  static const std::vector<std::pair<std::string, InstanceFn>> checks = {
      {"matmul", check_matmul},
      {"conv2d", check_conv2d},
      {"pool_avg", check_pool_avg},
      {"pool_max", check_pool_max},
      {"batch_norm", check_batch_norm},
      {"relu", check_relu},
      {"sigmoid", check_sigmoid},
      {"tanh", check_tanh},
      {"softmax", check_softmax},
      {"cross_entropy", check_cross_entropy},
      {"lstm_step", check_lstm_step},
      {"bilinear_sample", check_bilinear_sample},
      {"affine_crop_theta", check_affine_crop_theta},
      {"ctc_loss", check_ctc_loss},
      {"global_avg_pool", check_global_avg_pool},
      {"columns_over_width", check_columns_over_width},
      {"composite_forward", [](Rng& r) { return check_composite(r, HeadKind::Ensemble); }},
      {"composite_forward_ctc", [](Rng& r) { return check_composite(r, HeadKind::Ctc); }},
  };
  return checks;
}

}  // namespace

std::vector<std::string> check_names() {
  std::vector<std::string> names;
  for (const auto& c : registry()) names.push_back(c.first);
  return names;
}

Report run_check(const std::string& name, uint64_t seed, int instances) {
  const InstanceFn* fn = nullptr;
  for (const auto& c : registry())
    if (c.first == name) fn = &c.second;
  if (fn == nullptr) throw ContractError("unknown gradcheck op: " + name);

  Report rep;
  rep.op = name;
  rep.tolerance = tolerance();
  rep.instances = instances;
  for (int i = 0; i < instances; ++i) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(i) * 7919 + std::hash<std::string>{}(name)));
    rep.max_rel_err = std::max(rep.max_rel_err, (*fn)(rng));
  }
  rep.pass = rep.max_rel_err < rep.tolerance;
  return rep;
}

std::vector<Report> run_all(uint64_t seed, int instances, const std::string& filter) {
  std::vector<Report> out;
  for (const auto& c : registry()) {
    if (!filter.empty() && c.first.find(filter) == std::string::npos) continue;
    out.push_back(run_check(c.first, seed, instances));
  }
  if (out.empty() && !filter.empty())
    throw ContractError("gradcheck filter matches no op: " + filter);
  return out;
}

}  // namespace gradcheck
}  // namespace spotter

#include "spotter/model.hpp"

#include <algorithm>
#include <cmath>

namespace spotter {

HeadKind head_kind_from_string(const std::string& s) {
  if (s == "ensemble") return HeadKind::Ensemble;
  if (s == "ctc") return HeadKind::Ctc;
  throw ConfigError("unknown head kind '" + s + "' (expected ensemble or ctc)");
}

std::string to_string(HeadKind k) {
  return k == HeadKind::Ensemble ? "ensemble" : "ctc";
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw ContractError(std::string("ModelConfig: ") + what + " must be >= 1");
  };
  positive(n_regions, "n_regions");
  positive(timesteps, "timesteps");
  positive(blstm_hidden, "blstm_hidden");
  positive(region_h, "region_h");
  positive(region_w, "region_w");
  positive(input_h, "input_h");
  positive(input_w, "input_w");
  positive(input_channels, "input_channels");
  for (int f : loc_filters) positive(f, "loc_filters");
  for (int f : rec_filters) positive(f, "rec_filters");
  if (alphabet.empty()) throw ContractError("ModelConfig: alphabet must not be empty");
}

Conv2dLayer Conv2dLayer::init(int64_t in_c, int64_t out_c, int64_t k, int stride,
                              int pad, Rng& rng) {
  Conv2dLayer l;
  l.stride = stride;
  l.pad = pad;
  const double stddev = std::sqrt(2.0 / static_cast<double>(in_c * k * k));
  std::vector<scalar> w(static_cast<size_t>(out_c * in_c * k * k));
  for (auto& v : w) v = static_cast<scalar>(rng.gaussian(0.0, stddev));
  l.w = Tensor::from_data({out_c, in_c, k, k}, std::move(w)).set_requires_grad(true);
  return l;
}

Tensor Conv2dLayer::forward(Tape& tape, const Tensor& x) const {
  return ops::conv2d(tape, x, w, stride, pad);
}

BatchNormLayer BatchNormLayer::init(int64_t channels) {
  BatchNormLayer l;
  l.gamma = Tensor::full({channels}, scalar(1)).set_requires_grad(true);
  l.beta = Tensor::zeros({channels}).set_requires_grad(true);
  l.stats.init(channels);
  return l;
}

Tensor BatchNormLayer::forward(Tape& tape, const Tensor& x, Mode mode,
                               BnObserver* obs) const {
  return ops::batch_norm(tape, x, gamma, beta, mode,
                         const_cast<RunningStats&>(stats), obs);
}

ResidualBlock ResidualBlock::init(int64_t in_c, int64_t out_c, Rng& rng) {
  ResidualBlock b;
  b.conv1 = Conv2dLayer::init(in_c, out_c, 3, 1, 1, rng);
  b.bn1 = BatchNormLayer::init(out_c);
  b.conv2 = Conv2dLayer::init(out_c, out_c, 3, 1, 1, rng);
  b.bn2 = BatchNormLayer::init(out_c);
  if (in_c != out_c) {
    b.proj = Conv2dLayer::init(in_c, out_c, 1, 1, 0, rng);
    b.bn_proj = BatchNormLayer::init(out_c);
  }
  return b;
}

Tensor ResidualBlock::forward(Tape& tape, const Tensor& x, Mode mode,
                              BnObserver* obs) const {
  Tensor h = ops::relu(tape, bn1.forward(tape, conv1.forward(tape, x), mode, obs));
  h = bn2.forward(tape, conv2.forward(tape, h), mode, obs);
  Tensor shortcut = x;
  if (proj.has_value())
    shortcut = bn_proj->forward(tape, proj->forward(tape, x), mode, obs);
  return ops::relu(tape, ops::add(tape, h, shortcut));
}

namespace {

void trace_shape(ShapeTrace* trace, const char* prefix, const char* layer,
                 const Tensor& t) {
  if (trace != nullptr)
    trace->emplace_back(std::string(prefix) + "." + layer, t.shape());
}

Tensor named_pool(Tape& tape, const Tensor& x, ops::PoolKind kind, int k,
                  int stride, const char* prefix, const char* layer) {
  try {
    return ops::pool(tape, x, kind, k, stride);
  } catch (const ShapeError& e) {
    throw ShapeError(std::string(prefix) + "." + layer + ": " + e.what());
  }
}

}  // namespace

ConvBackbone ConvBackbone::init(int64_t in_c, const std::array<int, 3>& filters,
                                Rng& rng) {
  ConvBackbone b;
  b.stem = Conv2dLayer::init(in_c, filters[0], 3, 1, 1, rng);
  b.stem_bn = BatchNormLayer::init(filters[0]);
  b.block1 = ResidualBlock::init(filters[0], filters[0], rng);
  b.block2 = ResidualBlock::init(filters[0], filters[1], rng);
  b.block3 = ResidualBlock::init(filters[1], filters[2], rng);
  return b;
}

Tensor ConvBackbone::feature_map(Tape& tape, const Tensor& x, Mode mode,
                                 BnObserver* obs, ShapeTrace* trace,
                                 const char* prefix) const {
  Tensor h = ops::relu(tape, stem_bn.forward(tape, stem.forward(tape, x), mode, obs));
  trace_shape(trace, prefix, "stem", h);
  h = named_pool(tape, h, ops::PoolKind::Avg, 2, 2, prefix, "avg_pool");
  trace_shape(trace, prefix, "avg_pool", h);
  h = block1.forward(tape, h, mode, obs);
  trace_shape(trace, prefix, "block1", h);
  h = block2.forward(tape, h, mode, obs);
  trace_shape(trace, prefix, "block2", h);
  h = named_pool(tape, h, ops::PoolKind::Max, 2, 2, prefix, "max_pool");
  trace_shape(trace, prefix, "max_pool", h);
  h = block3.forward(tape, h, mode, obs);
  trace_shape(trace, prefix, "block3", h);
  return h;
}

Tensor ConvBackbone::feature_vector(Tape& tape, const Tensor& x, Mode mode,
                                    BnObserver* obs, ShapeTrace* trace,
                                    const char* prefix) const {
  Tensor h = feature_map(tape, x, mode, obs, trace, prefix);
  h = ops::global_avg_pool(tape, h);
  trace_shape(trace, prefix, "global_pool", h);
  return h;
}

std::vector<Tensor> LocalizationNet::predict_thetas(Tape& tape, const Tensor& image,
                                                    const ModelConfig& cfg, Mode mode,
                                                    BnObserver* obs,
                                                    ShapeTrace* trace) const {
  Tensor c = cnn.feature_vector(tape, image, mode, obs, trace, "loc");
  return predict_affine_sequence(tape, c, cfg.n_regions, blstm_fwd, blstm_bwd,
                                 head, cfg.disable_rotation_skew);
}

Tensor RecognitionNet::logits(Tape& tape, const Tensor& region,
                              const ModelConfig& cfg, Mode mode, BnObserver* obs,
                              ShapeTrace* trace) const {
  if (cfg.head == HeadKind::Ensemble) {
    Tensor feat = cnn.feature_vector(tape, region, mode, obs, trace, "rec");
    std::vector<Tensor> rows;
    rows.reserve(ensemble_heads.size());
    for (const auto& head : ensemble_heads) rows.push_back(head.forward(tape, feat));
    Tensor out = ops::stack_rows(tape, rows);
    trace_shape(trace, "rec", "ensemble_logits", out);
    return out;
  }
  Tensor map = cnn.feature_map(tape, region, mode, obs, trace, "rec");
  Tensor seq = ops::columns_over_width(tape, map);  // W' x C
  trace_shape(trace, "rec", "column_features", seq);
  Tensor out = ctc_head.forward(tape, seq);
  trace_shape(trace, "rec", "ctc_logits", out);
  return out;
}

LocalizationNet build_localization_net(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  LocalizationNet net;
  net.cnn = ConvBackbone::init(cfg.input_channels, cfg.loc_filters, rng);
  net.blstm_fwd = LstmParams::init(cfg.loc_filters[2], cfg.blstm_hidden, rng);
  net.blstm_bwd = LstmParams::init(cfg.loc_filters[2], cfg.blstm_hidden, rng);
  // Zero weights with an identity-like bias: initial crops cover most of the
  // image so the recognition net sees usable content from step one.
  net.head = DenseParams::zero_with_bias(
      2 * cfg.blstm_hidden, {scalar(0.9), 0, 0, 0, scalar(0.9), 0});
  return net;
}

RecognitionNet build_recognition_net(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  RecognitionNet net;
  net.cnn = ConvBackbone::init(cfg.input_channels, cfg.rec_filters, rng);
  const int64_t feat = cfg.rec_filters[2];
  const int64_t classes = static_cast<int64_t>(cfg.alphabet.size()) + 1;
  if (cfg.head == HeadKind::Ensemble) {
    net.ensemble_heads.reserve(static_cast<size_t>(cfg.timesteps));
    for (int t = 0; t < cfg.timesteps; ++t)
      net.ensemble_heads.push_back(DenseParams::init(feat, classes, rng));
  } else {
    net.ctc_head = DenseParams::init(feat, classes, rng);
  }
  return net;
}

TextSpotter TextSpotter::build(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  TextSpotter m;
  m.cfg_ = cfg;
  m.alphabet_ = Alphabet(cfg.alphabet);
  m.loc_ = build_localization_net(cfg, rng);
  m.rec_ = build_recognition_net(cfg, rng);
  return m;
}

ForwardResult TextSpotter::forward(Tape& tape, const Tensor& image, Mode mode,
                                   BnObserver* obs, ShapeTrace* trace) const {
  if (image.ndim() != 3 || image.dim(0) != cfg_.input_channels ||
      image.dim(1) != cfg_.input_h || image.dim(2) != cfg_.input_w)
    throw ShapeError("forward: image does not match the configured input size");

  ForwardResult fr;
  fr.thetas = loc_.predict_thetas(tape, image, cfg_, mode, obs, trace);
  fr.grids.reserve(fr.thetas.size());
  for (size_t n = 0; n < fr.thetas.size(); ++n) {
    AffineParams p;
    for (int i = 0; i < 6; ++i)
      p.theta[static_cast<size_t>(i)] = static_cast<double>(fr.thetas[n].data()[static_cast<size_t>(i)]);
    SamplingGrid g = generate_grid(p, cfg_.region_h, cfg_.region_w, cfg_.input_h, cfg_.input_w);
    g.region_index = static_cast<int>(n);
    fr.grids.push_back(std::move(g));
  }
  fr.boxes = extract_boxes(fr.grids);

  fr.region_logits.reserve(fr.thetas.size());
  for (const auto& theta : fr.thetas) {
    // Crops sample the raw input image, not an internal feature map.
    Tensor crop = affine_crop(tape, image, theta, cfg_.region_h, cfg_.region_w);
    fr.region_logits.push_back(rec_.logits(tape, crop, cfg_, mode, obs, trace));
  }
  return fr;
}

Tensor TextSpotter::loss(Tape& tape, const ForwardResult& fr,
                         const std::vector<std::vector<int>>& region_targets) const {
  if (region_targets.size() != fr.region_logits.size())
    throw ContractError("loss: one target sequence per region required");
  Tensor total;
  for (size_t n = 0; n < fr.region_logits.size(); ++n) {
    Tensor l = cfg_.head == HeadKind::Ensemble
                   ? ensemble_loss(tape, fr.region_logits[n], region_targets[n],
                                   cfg_.timesteps)
                   : ctc_loss(tape, fr.region_logits[n], region_targets[n]);
    total = total.defined() ? ops::add(tape, total, l) : l;
  }
  return ops::scale(tape, total, scalar(1) / static_cast<scalar>(fr.region_logits.size()));
}

std::vector<RegionPrediction> TextSpotter::predict(const Tensor& image) const {
  Tape tape;
  tape.set_recording(false);
  ForwardResult fr = forward(tape, image, Mode::Infer);

  std::vector<RegionPrediction> out;
  out.reserve(fr.region_logits.size());
  for (size_t n = 0; n < fr.region_logits.size(); ++n) {
    RegionPrediction p;
    p.box = fr.boxes[n];
    const Tensor& logits = fr.region_logits[n];
    const int64_t rows = logits.dim(0), k = logits.dim(1);

    // Mean of per-position top softmax probabilities.
    double conf = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
      const scalar* row = logits.ptr() + r * k;
      double mx = static_cast<double>(row[0]);
      for (int64_t i = 1; i < k; ++i) mx = std::max(mx, static_cast<double>(row[i]));
      double denom = 0.0;
      for (int64_t i = 0; i < k; ++i) denom += std::exp(static_cast<double>(row[i]) - mx);
      conf += 1.0 / denom;  // top prob = exp(max - max) / denom
    }
    p.confidence = rows > 0 ? conf / static_cast<double>(rows) : 0.0;

    if (cfg_.head == HeadKind::Ensemble) {
      p.classes = best_path_raw(logits);
    } else {
      p.classes = best_path_decode(logits);
    }
    p.text = alphabet_.decode(p.classes);
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

template <typename Fn>
void visit_dense(const std::string& name, DenseParams& d, const Fn& fn) {
  fn(name + ".w", d.w);
  fn(name + ".b", d.b);
}

template <typename Fn>
void visit_block(const std::string& name, ResidualBlock& b, const Fn& fn) {
  fn(name + ".conv1.w", b.conv1.w);
  fn(name + ".bn1.gamma", b.bn1.gamma);
  fn(name + ".bn1.beta", b.bn1.beta);
  fn(name + ".conv2.w", b.conv2.w);
  fn(name + ".bn2.gamma", b.bn2.gamma);
  fn(name + ".bn2.beta", b.bn2.beta);
  if (b.proj.has_value()) {
    fn(name + ".proj.w", b.proj->w);
    fn(name + ".bn_proj.gamma", b.bn_proj->gamma);
    fn(name + ".bn_proj.beta", b.bn_proj->beta);
  }
}

template <typename Fn>
void visit_backbone(const std::string& name, ConvBackbone& b, const Fn& fn) {
  fn(name + ".stem.w", b.stem.w);
  fn(name + ".stem_bn.gamma", b.stem_bn.gamma);
  fn(name + ".stem_bn.beta", b.stem_bn.beta);
  visit_block(name + ".block1", b.block1, fn);
  visit_block(name + ".block2", b.block2, fn);
  visit_block(name + ".block3", b.block3, fn);
}

template <typename Fn>
void visit_lstm(const std::string& name, LstmParams& p, const Fn& fn) {
  fn(name + ".wx", p.wx);
  fn(name + ".wh", p.wh);
  fn(name + ".b", p.b);
}

template <typename Fn>
void visit_all_params(const ModelConfig& cfg, LocalizationNet& loc,
                      RecognitionNet& rec, const Fn& fn) {
  visit_backbone("loc", loc.cnn, fn);
  visit_lstm("loc.blstm_fwd", loc.blstm_fwd, fn);
  visit_lstm("loc.blstm_bwd", loc.blstm_bwd, fn);
  visit_dense("loc.head", loc.head, fn);
  visit_backbone("rec", rec.cnn, fn);
  if (cfg.head == HeadKind::Ensemble) {
    for (size_t t = 0; t < rec.ensemble_heads.size(); ++t)
      visit_dense("rec.head" + std::to_string(t), rec.ensemble_heads[t], fn);
  } else {
    visit_dense("rec.ctc_head", rec.ctc_head, fn);
  }
}

// Running-stat visitation order matches BnObserver append order for one
// backbone pass: stem, block1.bn1, block1.bn2, (block1.bn_proj), block2...
template <typename Fn>
void visit_backbone_stats(const std::string& name, ConvBackbone& b, const Fn& fn) {
  fn(name + ".stem_bn", b.stem_bn.stats);
  const char* labels[3] = {".block1", ".block2", ".block3"};
  ResidualBlock* blocks[3] = {&b.block1, &b.block2, &b.block3};
  for (int i = 0; i < 3; ++i) {
    const std::string bn = name + labels[i];
    fn(bn + ".bn1", blocks[i]->bn1.stats);
    fn(bn + ".bn2", blocks[i]->bn2.stats);
    if (blocks[i]->bn_proj.has_value()) fn(bn + ".bn_proj", blocks[i]->bn_proj->stats);
  }
}

}  // namespace

void TextSpotter::visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_all_params(cfg_, loc_, rec_, fn);
}

void TextSpotter::visit_params(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  auto* self = const_cast<TextSpotter*>(this);
  visit_all_params(cfg_, self->loc_, self->rec_,
                   [&fn](const std::string& n, Tensor& t) { fn(n, t); });
}

void TextSpotter::visit_stats(const std::function<void(const std::string&, RunningStats&)>& fn) {
  visit_backbone_stats("loc", loc_.cnn, fn);
  visit_backbone_stats("rec", rec_.cnn, fn);
}

void TextSpotter::visit_stats(
    const std::function<void(const std::string&, const RunningStats&)>& fn) const {
  auto* self = const_cast<TextSpotter*>(this);
  self->visit_stats([&fn](const std::string& n, RunningStats& s) { fn(n, s); });
}

void TextSpotter::copy_from(const TextSpotter& other) {
  if (!(cfg_ == other.config()))
    throw ContractError("copy_from: model configurations differ");
  std::vector<const Tensor*> src;
  other.visit_params([&src](const std::string&, const Tensor& t) { src.push_back(&t); });
  size_t i = 0;
  visit_params([&](const std::string&, Tensor& t) { t.data() = src[i++]->data(); });

  std::vector<const RunningStats*> src_stats;
  other.visit_stats([&src_stats](const std::string&, const RunningStats& s) {
    src_stats.push_back(&s);
  });
  size_t j = 0;
  visit_stats([&](const std::string&, RunningStats& s) {
    s.mean = src_stats[j]->mean;
    s.var = src_stats[j]->var;
    ++j;
  });
}

void TextSpotter::reinit_recognition(Rng& rng) {
  rec_ = build_recognition_net(cfg_, rng);
}

int64_t TextSpotter::parameter_count() const {
  int64_t n = 0;
  visit_params([&n](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

void TextSpotter::fold_bn_stats(const BnObserver& obs) {
  std::vector<RunningStats*> loc_stats, rec_stats;
  visit_backbone_stats("loc", loc_.cnn, [&](const std::string&, RunningStats& s) {
    loc_stats.push_back(&s);
  });
  visit_backbone_stats("rec", rec_.cnn, [&](const std::string&, RunningStats& s) {
    rec_stats.push_back(&s);
  });

  // One forward pass appends the localisation stack once, then the
  // recognition stack once per region.
  const size_t per_sample =
      loc_stats.size() + rec_stats.size() * static_cast<size_t>(cfg_.n_regions);
  if (per_sample == 0 || obs.entries.size() % per_sample != 0)
    throw ContractError("fold_bn_stats: observer entry count does not match the model layout");
  for (size_t e = 0; e < obs.entries.size(); ++e) {
    const size_t within = e % per_sample;
    RunningStats* target =
        within < loc_stats.size()
            ? loc_stats[within]
            : rec_stats[(within - loc_stats.size()) % rec_stats.size()];
    target->update(obs.entries[e].first, obs.entries[e].second, kBatchNormMomentum);
  }
}

}  // namespace spotter

#include "spotter/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

namespace spotter {

namespace fs = std::filesystem;

InitPolicy init_policy_from_string(const std::string& s) {
  if (s == "fresh") return InitPolicy::Fresh;
  if (s == "carry_all") return InitPolicy::CarryAll;
  if (s == "carry_localization_reinit_recognition")
    return InitPolicy::CarryLocalizationReinitRecognition;
  throw ConfigError("unknown init policy '" + s + "'");
}

std::string to_string(InitPolicy p) {
  switch (p) {
    case InitPolicy::Fresh: return "fresh";
    case InitPolicy::CarryAll: return "carry_all";
    default: return "carry_localization_reinit_recognition";
  }
}

namespace {

std::vector<std::vector<int>> encode_targets(const Alphabet& alphabet,
                                             const std::vector<std::string>& labels) {
  std::vector<std::vector<int>> out;
  out.reserve(labels.size());
  for (const auto& l : labels) out.push_back(alphabet.encode(l));
  return out;
}

struct RegionMatch {
  bool exact = false;
  int64_t positions = 0, correct = 0;  // ensemble char accounting
  int64_t edits = 0, target_len = 0;   // ctc char accounting
};

RegionMatch match_region(const TextSpotter& model, const Tensor& logits,
                         const std::vector<int>& target) {
  RegionMatch m;
  const auto& cfg = model.config();
  if (cfg.head == HeadKind::Ensemble) {
    const std::vector<int> padded = pad_with_blank(target, cfg.timesteps);
    const std::vector<int> pred = best_path_raw(logits);
    m.positions = cfg.timesteps;
    m.exact = pred == padded;
    for (int t = 0; t < cfg.timesteps; ++t)
      if (pred[static_cast<size_t>(t)] == padded[static_cast<size_t>(t)]) ++m.correct;
  } else {
    const std::vector<int> pred = best_path_decode(logits);
    m.exact = pred == target;
    m.edits = edit_distance(pred, target);
    m.target_len = static_cast<int64_t>(target.size());
  }
  return m;
}

struct EvalAccum {
  int64_t samples = 0, exact_samples = 0;
  int64_t positions = 0, correct = 0;
  int64_t edits = 0, target_len = 0;
  double loss = 0.0;
  double iou = 0.0;
  int64_t iou_samples = 0;

  void merge(const EvalAccum& o) {
    samples += o.samples;
    exact_samples += o.exact_samples;
    positions += o.positions;
    correct += o.correct;
    edits += o.edits;
    target_len += o.target_len;
    loss += o.loss;
    iou += o.iou;
    iou_samples += o.iou_samples;
  }
};

void eval_range(const TextSpotter& model, const Dataset& dataset, size_t lo,
                size_t hi, EvalAccum& acc) {
  Tape tape;
  for (size_t i = lo; i < hi; ++i) {
    const EvalSample sample = dataset.eval_sample(i);
    if (static_cast<int>(sample.labels.size()) != model.config().n_regions)
      throw ContractError("evaluate: sample has " + std::to_string(sample.labels.size()) +
                          " labels but the model expects " +
                          std::to_string(model.config().n_regions));
    const auto targets = encode_targets(model.alphabet(), sample.labels);

    tape.clear();
    tape.set_recording(false);
    const ForwardResult fr = model.forward(tape, sample.image, Mode::Infer);
    acc.loss += static_cast<double>(model.loss(tape, fr, targets).item());

    bool all_exact = true;
    for (size_t n = 0; n < fr.region_logits.size(); ++n) {
      const RegionMatch m = match_region(model, fr.region_logits[n], targets[n]);
      all_exact = all_exact && m.exact;
      acc.positions += m.positions;
      acc.correct += m.correct;
      acc.edits += m.edits;
      acc.target_len += m.target_len;
    }
    acc.samples += 1;
    acc.exact_samples += all_exact ? 1 : 0;
    if (sample.has_boxes && sample.boxes.size() == fr.boxes.size()) {
      acc.iou += mean_iou(fr.boxes, sample.boxes);
      acc.iou_samples += 1;
    }
  }
}

}  // namespace

EvalReport evaluate(const TextSpotter& model, const Dataset& dataset, int threads,
                    int max_samples) {
  if (dataset.empty()) throw ContractError("evaluate: dataset is empty");
  const size_t n = max_samples > 0
                       ? std::min(dataset.size(), static_cast<size_t>(max_samples))
                       : dataset.size();
  threads = std::max(1, std::min<int>(threads, static_cast<int>(n)));

  std::vector<EvalAccum> parts(static_cast<size_t>(threads));
  if (threads == 1) {
    eval_range(model, dataset, 0, n, parts[0]);
  } else {
    // Each worker gets a read-only replica; forward in inference mode is
    // side-effect free.
    std::vector<std::thread> pool;
    const size_t chunk = (n + static_cast<size_t>(threads) - 1) / static_cast<size_t>(threads);
    for (int w = 0; w < threads; ++w) {
      const size_t lo = static_cast<size_t>(w) * chunk;
      const size_t hi = std::min(n, lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back([&model, &dataset, lo, hi, &parts, w] {
        eval_range(model, dataset, lo, hi, parts[static_cast<size_t>(w)]);
      });
    }
    for (auto& t : pool) t.join();
  }

  EvalAccum acc;
  for (const auto& p : parts) acc.merge(p);

  EvalReport report;
  report.samples = static_cast<int>(acc.samples);
  report.seq_acc = acc.samples > 0 ? static_cast<double>(acc.exact_samples) / acc.samples : 0.0;
  if (model.config().head == HeadKind::Ensemble) {
    report.char_acc = acc.positions > 0 ? static_cast<double>(acc.correct) / acc.positions : 0.0;
  } else {
    report.char_acc =
        acc.target_len > 0
            ? std::max(0.0, 1.0 - static_cast<double>(acc.edits) / static_cast<double>(acc.target_len))
            : (acc.edits == 0 ? 1.0 : 0.0);
  }
  report.mean_loss = acc.samples > 0 ? acc.loss / acc.samples : 0.0;
  report.mean_iou = acc.iou_samples > 0 ? acc.iou / acc.iou_samples : -1.0;
  return report;
}

std::pair<Dataset, Dataset> stage_datasets(const StageConfig& stage, int stage_index,
                                           uint64_t seed) {
  if (!stage.data_dir.empty()) {
    Dataset train = Dataset::load(stage.data_dir + "/train");
    Dataset val = Dataset::load(stage.data_dir + "/val");
    return {std::move(train), std::move(val)};
  }
  const uint64_t base = mix_seed(seed, 0xD5 + static_cast<uint64_t>(stage_index));
  std::vector<LabeledScene> train_scenes, val_scenes;
  train_scenes.reserve(static_cast<size_t>(stage.train_count));
  val_scenes.reserve(static_cast<size_t>(stage.eval_count));
  for (int i = 0; i < stage.train_count; ++i) {
    SceneSpec s = stage.scene;
    s.seed = mix_seed(base, static_cast<uint64_t>(i));
    train_scenes.push_back(generate_scene(s));
  }
  for (int i = 0; i < stage.eval_count; ++i) {
    SceneSpec s = stage.scene;
    s.seed = mix_seed(base, 0x80000000ull + static_cast<uint64_t>(i));
    val_scenes.push_back(generate_scene(s));
  }
  return {Dataset::from_scenes(std::move(train_scenes)),
          Dataset::from_scenes(std::move(val_scenes))};
}

namespace {

// One training worker: an owned replica whose parameter gradients accumulate
// across the samples it processes within a batch.
struct Worker {
  TextSpotter replica;
  std::vector<Tensor*> params;
  BnObserver observer;
  double loss_sum = 0.0;
  bool non_finite = false;

  explicit Worker(const TextSpotter& master) {
    Rng tmp(0);
    replica = TextSpotter::build(master.config(), tmp);
    replica.copy_from(master);
    replica.visit_params([this](const std::string&, Tensor& t) { params.push_back(&t); });
  }

  void sync(const TextSpotter& master) {
    replica.copy_from(master);
    for (Tensor* p : params) {
      p->ensure_grad();
      p->zero_grad();
    }
    observer.entries.clear();
    loss_sum = 0.0;
    non_finite = false;
  }

  void run(const Dataset& data, const std::vector<size_t>& order, size_t lo, size_t hi) {
    Tape tape;
    for (size_t i = lo; i < hi && !non_finite; ++i) {
      const TrainSample sample = data.train_sample(order[i]);
      const auto targets = encode_targets(replica.alphabet(), sample.labels);
      tape.clear();
      const ForwardResult fr = replica.forward(tape, sample.image, Mode::Train, &observer);
      const Tensor loss = replica.loss(tape, fr, targets);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        non_finite = true;
        break;
      }
      loss_sum += lv;
      tape.backward(loss);
    }
  }
};

struct MetricsWriter {
  std::ofstream file;

  explicit MetricsWriter(const std::string& out_dir) {
    if (out_dir.empty()) return;
    fs::create_directories(out_dir);
    file.open(fs::path(out_dir) / "metrics.jsonl", std::ios::app);
  }

  void write(const EpochRecord& r) {
    if (!file.is_open()) return;
    nlohmann::json j{{"stage", r.stage},
                     {"epoch", r.epoch},
                     {"loss", r.train_loss},
                     {"seq_acc", r.eval.seq_acc},
                     {"char_acc", r.eval.char_acc},
                     {"wall_ms", r.wall_ms}};
    if (r.eval.mean_iou >= 0.0) j["mean_iou"] = r.eval.mean_iou;
    file << j.dump() << '\n';
    file.flush();
  }
};

// Full in-memory snapshot used by the divergence retry.
struct StageSnapshot {
  TextSpotter model;
  std::string rng;
  int64_t step = 0;

  StageSnapshot(const TextSpotter& m, const Rng& rng_state, int64_t s)
      : rng(rng_state.serialize()), step(s) {
    Rng tmp(0);
    model = TextSpotter::build(m.config(), tmp);
    model.copy_from(m);
  }
};

void apply_init_policy(TextSpotter& model, InitPolicy policy, uint64_t seed,
                       int stage_index) {
  Rng rng(mix_seed(seed, 0x11417 + static_cast<uint64_t>(stage_index)));
  switch (policy) {
    case InitPolicy::Fresh:
      model = TextSpotter::build(model.config(), rng);
      break;
    case InitPolicy::CarryAll:
      break;
    case InitPolicy::CarryLocalizationReinitRecognition:
      model.reinit_recognition(rng);
      break;
  }
}

}  // namespace

TrainResult run_curriculum(TextSpotter& model, const std::vector<StageConfig>& stages,
                           const TrainOptions& opts) {
  if (stages.empty()) throw ContractError("run_curriculum: no stages");
  if (stages.front().init != InitPolicy::Fresh && opts.resume_checkpoint.empty())
    throw ContractError("run_curriculum: stage 0 must use the fresh init policy");
  for (const auto& s : stages) s.opt.validate();

  const int threads = opts.deterministic ? 1 : std::max(1, opts.threads);
  TrainResult result;
  MetricsWriter metrics(opts.out_dir);

  Rng train_rng(mix_seed(opts.seed, 0x7241));
  int start_stage = 0, start_epoch = 0;
  int64_t global_step = 0;
  std::optional<Optimizer> optimizer;

  if (!opts.resume_checkpoint.empty()) {
    CheckpointData data = load_checkpoint(opts.resume_checkpoint);
    if (!(data.config == model.config()))
      throw CheckpointError(CheckpointErrorCode::ShapeMismatch,
                            "resume checkpoint was written for a different model config");
    load_into_model(model, data);
    if (data.optimizer.has_value()) optimizer.emplace(restore_optimizer(data, model));
    if (!data.trainer.has_value())
      throw CheckpointError(CheckpointErrorCode::ManifestParse,
                            "resume checkpoint holds no trainer state");
    start_stage = data.trainer->stage;
    start_epoch = data.trainer->epoch;
    global_step = data.trainer->step;
    train_rng.deserialize(data.trainer->rng);
  }

  int checkpoint_counter = 0;
  for (int si = start_stage; si < static_cast<int>(stages.size()); ++si) {
    const StageConfig& stage = stages[static_cast<size_t>(si)];
    const int first_epoch = si == start_stage ? start_epoch : 0;
    const bool fresh_stage_entry = first_epoch == 0;

    if (fresh_stage_entry) apply_init_policy(model, stage.init, opts.seed, si);

    auto [train_set, eval_set] = stage_datasets(stage, si, opts.seed);
    train_set.preload();
    eval_set.preload();

    OptimizerConfig oc = stage.opt;
    if (fresh_stage_entry || !optimizer.has_value()) {
      optimizer.emplace(oc);
      optimizer->set_step_count(global_step);
    }

    // Snapshot for the one-shot lr/10 retry on divergence.
    StageSnapshot snapshot(model, train_rng, global_step);
    bool retried = false;

    std::vector<std::unique_ptr<Worker>> workers;
    for (int w = 0; w < threads; ++w) workers.push_back(std::make_unique<Worker>(model));

    std::vector<std::pair<std::string, Tensor*>> master_params;
    model.visit_params([&master_params](const std::string& n, Tensor& t) {
      master_params.emplace_back(n, &t);
    });

    int epoch = first_epoch;
    while (epoch < stage.epochs) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::vector<size_t> order = train_set.shuffled_indices(train_rng);
      double loss_sum = 0.0;
      bool diverged = false;

      for (size_t batch_lo = 0; batch_lo < order.size() && !diverged;
           batch_lo += static_cast<size_t>(opts.batch_size)) {
        const size_t batch_hi =
            std::min(order.size(), batch_lo + static_cast<size_t>(opts.batch_size));
        const size_t batch_n = batch_hi - batch_lo;

        for (auto& w : workers) w->sync(model);
        if (threads == 1) {
          workers[0]->run(train_set, order, batch_lo, batch_hi);
        } else {
          std::vector<std::thread> pool;
          const size_t chunk = (batch_n + static_cast<size_t>(threads) - 1) / static_cast<size_t>(threads);
          for (int w = 0; w < threads; ++w) {
            const size_t lo = batch_lo + static_cast<size_t>(w) * chunk;
            const size_t hi = std::min(batch_hi, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back([&workers, &train_set, &order, lo, hi, w] {
              workers[static_cast<size_t>(w)]->run(train_set, order, lo, hi);
            });
          }
          for (auto& t : pool) t.join();
        }

        for (const auto& w : workers) diverged = diverged || w->non_finite;
        if (diverged) break;

        // Reduce gradients worker by worker (fixed order), then average.
        std::vector<std::vector<scalar>> grads(master_params.size());
        for (size_t k = 0; k < master_params.size(); ++k)
          grads[k].assign(master_params[k].second->data().size(), scalar(0));
        for (const auto& w : workers)
          for (size_t k = 0; k < grads.size(); ++k) {
            const auto& g = w->params[k]->grad();
            for (size_t i = 0; i < g.size(); ++i) grads[k][i] += g[i];
          }
        const scalar inv = scalar(1) / static_cast<scalar>(batch_n);
        for (auto& g : grads)
          for (auto& v : g) v *= inv;

        // Fold batch-norm statistics in sample order (workers own
        // contiguous ascending ranges).
        for (const auto& w : workers)
          if (!w->observer.entries.empty()) model.fold_bn_stats(w->observer);

        try {
          optimizer->step(model, grads);
        } catch (const DivergenceError&) {
          diverged = true;
          break;
        }
        for (const auto& w : workers) loss_sum += w->loss_sum;
        ++global_step;
      }

      if (diverged) {
        if (opts.retry_on_divergence && !retried) {
          retried = true;
          model.copy_from(snapshot.model);
          train_rng.deserialize(snapshot.rng);
          global_step = snapshot.step;
          oc.lr = oc.lr / scalar(10);
          optimizer.emplace(oc);
          optimizer->set_step_count(global_step);
          epoch = 0;
          if (opts.verbose)
            std::cerr << "stage " << si << " diverged; retrying at lr " << oc.lr << "\n";
          continue;
        }
        throw DivergenceError("training diverged in stage " + std::to_string(si) + " ('" +
                              stage.name + "')");
      }

      EpochRecord rec;
      rec.stage = stage.name;
      rec.epoch = epoch;
      rec.train_loss = loss_sum / static_cast<double>(train_set.size());
      rec.eval = evaluate(model, eval_set, threads, opts.eval_max_samples);
      // Deterministic mode pins the timing field so metrics files are
      // byte-identical across runs.
      rec.wall_ms = opts.deterministic
                        ? 0
                        : std::chrono::duration_cast<std::chrono::milliseconds>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
      metrics.write(rec);
      result.history.push_back(rec);
      if (opts.verbose)
        std::cerr << "stage " << stage.name << " epoch " << epoch << " loss "
                  << rec.train_loss << " seq_acc " << rec.eval.seq_acc << " char_acc "
                  << rec.eval.char_acc << " (" << rec.wall_ms << " ms)\n";

      ++epoch;
      if (!opts.out_dir.empty() && opts.checkpoint_every_epoch) {
        TrainerSnapshot ts;
        ts.stage = si;
        ts.epoch = epoch;  // next epoch to run
        ts.step = global_step;
        ts.rng = train_rng.serialize();
        char name[64];
        std::snprintf(name, sizeof(name), "ckpt-%04d-stage%d-epoch%d.ckpt",
                      checkpoint_counter++, si, epoch - 1);
        const std::string path = (fs::path(opts.out_dir) / name).string();
        save_checkpoint(path, model, &*optimizer, &ts);
        result.checkpoints.push_back(path);
      }
    }
  }
  result.final_step = global_step;
  return result;
}

}  // namespace spotter

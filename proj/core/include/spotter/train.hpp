#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "spotter/checkpoint.hpp"
#include "spotter/dataset.hpp"
#include "spotter/model.hpp"
#include "spotter/optim.hpp"

namespace spotter {

enum class InitPolicy { Fresh, CarryAll, CarryLocalizationReinitRecognition };

InitPolicy init_policy_from_string(const std::string& s);
std::string to_string(InitPolicy p);

// One curriculum stage: dataset difficulty, optimizer choice and epochs.
struct StageConfig {
  std::string name;
  SceneSpec scene;
  int train_count = 2000;
  int eval_count = 400;
  std::string data_dir;  // when set, load <dir>/train and <dir>/val instead
  OptimizerConfig opt;
  int epochs = 5;
  InitPolicy init = InitPolicy::CarryAll;
};

struct TrainOptions {
  int batch_size = 32;
  int threads = 1;
  uint64_t seed = 0;
  bool deterministic = false;  // forces threads = 1
  std::string out_dir;         // checkpoints + metrics.jsonl; empty = no files
  bool retry_on_divergence = true;  // one retry per stage at lr/10
  int eval_max_samples = 0;         // 0 = whole eval split
  std::string resume_checkpoint;
  bool verbose = false;
  bool checkpoint_every_epoch = true;
};

struct EvalReport {
  double seq_acc = 0.0;
  double char_acc = 0.0;
  double mean_loss = 0.0;
  double mean_iou = -1.0;  // -1 when the dataset carries no boxes
  int samples = 0;
};

struct EpochRecord {
  std::string stage;
  int epoch = 0;
  double train_loss = 0.0;
  EvalReport eval;
  int64_t wall_ms = 0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::vector<std::string> checkpoints;
  int64_t final_step = 0;
};

// Sequence accuracy: every character of every region exact. Character
// accuracy: per-position over the padded length for the ensemble head,
// edit-distance based (1 - CER) for the ctc head. mean_iou is filled when
// the dataset provides diagnostic boxes.
EvalReport evaluate(const TextSpotter& model, const Dataset& dataset,
                    int threads = 1, int max_samples = 0);

// Executes the stages in order, honouring each stage's init policy,
// checkpointing after every epoch and appending one JSON line per epoch to
// <out_dir>/metrics.jsonl. Stage datasets are synthesized deterministically
// from (seed, stage index) unless the stage names a data_dir.
TrainResult run_curriculum(TextSpotter& model, const std::vector<StageConfig>& stages,
                           const TrainOptions& opts);

// Builds the deterministic train/eval datasets for one stage.
std::pair<Dataset, Dataset> stage_datasets(const StageConfig& stage, int stage_index,
                                           uint64_t seed);

}  // namespace spotter

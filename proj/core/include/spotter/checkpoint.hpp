#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spotter/model.hpp"
#include "spotter/optim.hpp"

namespace spotter {

enum class CheckpointErrorCode { ManifestParse, VersionMismatch, Truncated, ShapeMismatch };

struct CheckpointError : std::runtime_error {
  CheckpointErrorCode code;
  CheckpointError(CheckpointErrorCode c, const std::string& msg)
      : std::runtime_error(msg), code(c) {}
};

// Training-loop position, saved so a resumed run replays the exact step
// sequence of an uninterrupted one.
struct TrainerSnapshot {
  int stage = 0;        // index of the stage in progress
  int epoch = 0;        // next epoch to run within that stage
  int64_t step = 0;     // global optimizer step count
  std::string rng;      // serialized training rng
};

struct OptimizerSnapshot {
  OptimizerConfig config;
  int64_t step = 0;
};

// Raw contents of a checkpoint file: manifest fields plus every tensor
// payload keyed by name.
struct CheckpointData {
  ModelConfig config;
  std::map<std::string, std::pair<std::vector<int64_t>, std::vector<scalar>>> tensors;
  std::optional<OptimizerSnapshot> optimizer;
  std::optional<TrainerSnapshot> trainer;
};

// File layout: one header line "SPOTTER-CKPT <version> <manifest bytes>",
// a JSON manifest (format version, model config, alphabet, tensor directory
// with byte offsets), then the little-endian float32 payloads back to back.
void save_checkpoint(const std::string& path, const TextSpotter& model,
                     const Optimizer* optimizer = nullptr,
                     const TrainerSnapshot* trainer = nullptr);

CheckpointData load_checkpoint(const std::string& path);

// Builds a model from the checkpoint's config and installs all parameters
// and running statistics.
TextSpotter restore_model(const CheckpointData& data);

// Installs parameters into an existing model; shapes must match exactly
// (error names the offending tensor).
void load_into_model(TextSpotter& model, const CheckpointData& data);

// Re-creates optimizer state buffers from the checkpoint.
Optimizer restore_optimizer(const CheckpointData& data, TextSpotter& model);

}  // namespace spotter

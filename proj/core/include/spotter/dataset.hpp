#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "spotter/rng.hpp"
#include "spotter/scene_synth.hpp"
#include "spotter/tensor.hpp"

namespace spotter {

// What the training loop is allowed to see: image and text labels only.
// Ground-truth boxes are deliberately absent from this type; the detection
// stage learns purely from recognition gradients.
struct TrainSample {
  Tensor image;
  std::vector<std::string> labels;
};

// Evaluation/diagnostic view; boxes present when the source provides them.
struct EvalSample {
  Tensor image;
  std::vector<std::string> labels;
  std::vector<std::array<double, 4>> boxes;
  bool has_boxes = false;
};

class Dataset {
 public:
  // Loads a dataset directory (images/NNNNNN.png + labels.jsonl).
  static Dataset load(const std::string& dir);
  // Wraps generated scenes without touching disk.
  static Dataset from_scenes(std::vector<LabeledScene> scenes);

  size_t size() const;
  bool empty() const { return size() == 0; }

  TrainSample train_sample(size_t index) const;
  EvalSample eval_sample(size_t index) const;

  // Decodes every image once up front (training-loop throughput).
  void preload();

  // Deterministic permutation of [0, size).
  std::vector<size_t> shuffled_indices(Rng& rng) const;

 private:
  struct Record {
    std::string image_path;  // empty for in-memory scenes
    std::vector<std::string> labels;
    std::vector<std::array<double, 4>> boxes;
    bool has_boxes = false;
    std::optional<Tensor> cached;
  };
  Tensor image_of(const Record& r) const;
  std::vector<Record> records_;
};

}  // namespace spotter

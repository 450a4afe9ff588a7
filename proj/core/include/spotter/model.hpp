#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "spotter/lstm.hpp"
#include "spotter/ops.hpp"
#include "spotter/recognition.hpp"
#include "spotter/rng.hpp"
#include "spotter/spatial_transformer.hpp"
#include "spotter/tensor.hpp"

namespace spotter {

enum class HeadKind { Ensemble, Ctc };

HeadKind head_kind_from_string(const std::string& s);
std::string to_string(HeadKind k);

struct ModelConfig {
  int n_regions = 1;
  int timesteps = 2;           // max word length for the ensemble head
  std::string alphabet = "0123456789";
  HeadKind head = HeadKind::Ensemble;
  std::array<int, 3> loc_filters{32, 48, 48};
  std::array<int, 3> rec_filters{32, 64, 128};
  int blstm_hidden = 256;
  int region_h = 32, region_w = 32;
  int input_h = 64, input_w = 64;
  int input_channels = 1;
  bool disable_rotation_skew = true;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Records (layer name, output shape) pairs during a forward pass.
using ShapeTrace = std::vector<std::pair<std::string, std::vector<int64_t>>>;

struct Conv2dLayer {
  Tensor w;  // F x C x k x k, no bias (batch norm follows every conv)
  int stride = 1, pad = 1;

  static Conv2dLayer init(int64_t in_c, int64_t out_c, int64_t k, int stride,
                          int pad, Rng& rng);
  Tensor forward(Tape& tape, const Tensor& x) const;
};

struct BatchNormLayer {
  Tensor gamma, beta;
  RunningStats stats;

  static BatchNormLayer init(int64_t channels);
  Tensor forward(Tape& tape, const Tensor& x, Mode mode, BnObserver* obs) const;
};

// Two 3x3 convolutions, each followed by batch norm; identity shortcut when
// the filter count is unchanged, 1x1 projection (+ batch norm) otherwise.
struct ResidualBlock {
  Conv2dLayer conv1, conv2;
  BatchNormLayer bn1, bn2;
  std::optional<Conv2dLayer> proj;
  std::optional<BatchNormLayer> bn_proj;

  static ResidualBlock init(int64_t in_c, int64_t out_c, Rng& rng);
  Tensor forward(Tape& tape, const Tensor& x, Mode mode, BnObserver* obs) const;
};

// Shared convolutional skeleton: 3x3 stem conv -> 2x2 avg pool s2 ->
// block1 -> block2 -> 2x2 max pool s2 -> block3. The terminal 5x5 average
// pool of the published layout is realised as an adaptive global average
// pool so the stack works at any input size.
struct ConvBackbone {
  Conv2dLayer stem;
  BatchNormLayer stem_bn;
  ResidualBlock block1, block2, block3;

  static ConvBackbone init(int64_t in_c, const std::array<int, 3>& filters, Rng& rng);
  // Feature map before any terminal pooling (C3 x H/4 x W/4).
  Tensor feature_map(Tape& tape, const Tensor& x, Mode mode, BnObserver* obs,
                     ShapeTrace* trace, const char* prefix) const;
  // Global average pooled feature vector, 1 x C3.
  Tensor feature_vector(Tape& tape, const Tensor& x, Mode mode, BnObserver* obs,
                        ShapeTrace* trace, const char* prefix) const;
};

struct LocalizationNet {
  ConvBackbone cnn;
  LstmParams blstm_fwd, blstm_bwd;
  DenseParams head;  // 2*hidden -> 6

  // One 1x6 theta tensor per region.
  std::vector<Tensor> predict_thetas(Tape& tape, const Tensor& image,
                                     const ModelConfig& cfg, Mode mode,
                                     BnObserver* obs, ShapeTrace* trace) const;
};

struct RecognitionNet {
  ConvBackbone cnn;
  std::vector<DenseParams> ensemble_heads;  // T heads, C3 -> K
  DenseParams ctc_head;                     // C3 -> K (per feature column)

  // Ensemble: T x K logits. CTC: W' x K logits (one row per feature column).
  Tensor logits(Tape& tape, const Tensor& region, const ModelConfig& cfg,
                Mode mode, BnObserver* obs, ShapeTrace* trace) const;
};

struct RegionPrediction {
  BoundingBox box;
  std::vector<int> classes;  // collapsed (ctc) or padded argmax (ensemble)
  std::string text;
  double confidence = 0.0;
};

struct ForwardResult {
  std::vector<Tensor> thetas;
  std::vector<SamplingGrid> grids;
  std::vector<BoundingBox> boxes;
  std::vector<Tensor> region_logits;
};

class TextSpotter {
 public:
  TextSpotter() = default;
  static TextSpotter build(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  const Alphabet& alphabet() const { return alphabet_; }
  LocalizationNet& localization() { return loc_; }
  RecognitionNet& recognition() { return rec_; }

  // Localisation -> N crops of the raw input image -> recognition on each
  // crop with shared weights.
  ForwardResult forward(Tape& tape, const Tensor& image, Mode mode,
                        BnObserver* obs = nullptr, ShapeTrace* trace = nullptr) const;

  // Mean over regions of the per-region loss (cross-entropy ensemble or CTC).
  Tensor loss(Tape& tape, const ForwardResult& fr,
              const std::vector<std::vector<int>>& region_targets) const;

  // Inference-mode decoded predictions.
  std::vector<RegionPrediction> predict(const Tensor& image) const;

  // Stable name -> parameter enumeration (weights, gammas, biases).
  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
  void visit_params(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  // Batch-norm running statistics, in the same layer order as BnObserver
  // entries are appended during a forward pass.
  void visit_stats(const std::function<void(const std::string&, RunningStats&)>& fn);
  void visit_stats(const std::function<void(const std::string&, const RunningStats&)>& fn) const;

  // Copies parameters and running stats from another model with identical
  // config (worker replicas, warm starts).
  void copy_from(const TextSpotter& other);

  // Re-initialises only the recognition network (the two-phase trick).
  void reinit_recognition(Rng& rng);

  int64_t parameter_count() const;

  // Folds observer entries into the running stats, in entry order.
  void fold_bn_stats(const BnObserver& obs);

 private:
  ModelConfig cfg_;
  Alphabet alphabet_;
  LocalizationNet loc_;
  RecognitionNet rec_;
};

// Builders for the two sub-networks (shape checks live in the forward pass).
LocalizationNet build_localization_net(const ModelConfig& cfg, Rng& rng);
RecognitionNet build_recognition_net(const ModelConfig& cfg, Rng& rng);

}  // namespace spotter

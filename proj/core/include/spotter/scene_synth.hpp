#pragma once

#include <array>
#include <string>
#include <vector>

#include "spotter/rng.hpp"
#include "spotter/tensor.hpp"

namespace spotter {

enum class Placement { Centered, Grid, Random };

Placement placement_from_string(const std::string& s);
std::string to_string(Placement p);

// Parameters of one synthetic digit scene. Difficulty is driven by region
// count, placement freedom, glyph scale and background noise.
struct SceneSpec {
  int canvas_h = 64, canvas_w = 64;
  int n_regions = 1;
  Placement placement = Placement::Centered;
  int digits_min = 1, digits_max = 2;
  int scale_min = 2, scale_max = 3;  // integer glyph magnification of a 5x7 font
  double noise = 0.25;               // background level in [0, 1]
  int jitter = 2;                    // max placement offset, px
  double contrast_margin = 0.25;     // min glyph/background separation
  uint64_t seed = 0;

  void validate() const;
};

struct LabeledScene {
  Tensor image;                     // 1 x H x W, values quantised to k/255
  std::vector<std::string> labels;  // top-to-bottom, then left-to-right
  // Ground-truth glyph boxes [x0,y0,x1,y1]; diagnostics only, never visible
  // to the training path.
  std::vector<std::array<double, 4>> boxes;
};

// Deterministic under spec.seed: the same spec yields a bit-identical scene.
LabeledScene generate_scene(const SceneSpec& spec);

// Renders `count` scenes (item i uses seed mix_seed(spec.seed, i)) and writes
// train/val/test dataset directories under out_dir, split by the given
// fractions (must sum to 1). Each split holds images/NNNNNN.png plus
// labels.jsonl. Returns the per-split counts.
std::array<int, 3> make_dataset(const SceneSpec& spec, int count,
                                const std::array<double, 3>& split_fractions,
                                const std::string& out_dir);

// Pixel size of one rendered digit string at a given scale, used by tests.
std::pair<int, int> glyph_block_size(int n_digits, int scale);

}  // namespace spotter

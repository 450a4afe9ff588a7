#pragma once

#include <string>
#include <vector>

#include "spotter/tensor.hpp"

namespace spotter {

// Ordered symbol set plus the blank class. Class 0 is always the blank;
// symbol i of the alphabet string maps to class i+1.
class Alphabet {
 public:
  Alphabet() = default;
  explicit Alphabet(std::string symbols);

  const std::string& symbols() const { return symbols_; }
  int blank() const { return 0; }
  int num_classes() const { return static_cast<int>(symbols_.size()) + 1; }

  int class_of(char c) const;                    // throws on unknown symbol
  char symbol_of(int cls) const;                 // cls in [1, num_classes)
  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& classes) const;  // skips blanks

 private:
  std::string symbols_;
  std::vector<int> lookup_;  // 256-entry char -> class, -1 unknown
};

// The label collapse: merge consecutive duplicates first, then delete blanks.
// Entries must lie in [0, num_classes).
std::vector<int> collapse_path(const std::vector<int>& path, int num_classes);

// Greedy decoding: per-timestep argmax over the class axis of a T x K score
// matrix (pre- or post-softmax gives the same path), then collapse.
std::vector<int> best_path_decode(const Tensor& logits);
// The raw argmax path, before collapsing.
std::vector<int> best_path_raw(const Tensor& logits);

// Negative log of the total probability of all paths collapsing to `target`,
// computed by the forward-backward recursion in log space over the
// blank-augmented target. logits: T x K. target: collapsed classes, no
// blanks. Throws CtcInfeasibleError when T < len(target) + repeats(target).
Tensor ctc_loss(Tape& tape, const Tensor& logits, const std::vector<int>& target);

// Feasibility helper: minimum number of timesteps needed for a target.
int64_t ctc_min_timesteps(const std::vector<int>& target);

// Mean cross-entropy of T per-position classifiers against a target padded
// with the blank class to length T. logits: T x K rows (one per position).
// Returns the scalar loss; `predictions` (optional) receives the per-position
// argmax classes.
Tensor ensemble_loss(Tape& tape, const Tensor& logits,
                     const std::vector<int>& target_no_blanks, int timesteps,
                     std::vector<int>* predictions = nullptr);

// Pads a collapsed target with blanks up to `timesteps` entries.
std::vector<int> pad_with_blank(const std::vector<int>& target, int timesteps);

// Levenshtein distance between two class sequences.
int64_t edit_distance(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace spotter

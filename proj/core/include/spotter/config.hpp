#pragma once

#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "spotter/model.hpp"
#include "spotter/scene_synth.hpp"
#include "spotter/train.hpp"

namespace spotter {

// Flat key/value configuration with sections:
//   [model] / [train] / [scene] hold singleton settings,
//   [stage NAME] sections (in file order) define the curriculum.
// Lines are `key = value`, '#' starts a comment. Every key must be consumed
// by a known field; leftovers are reported as unknown-field errors.
struct ConfigSection {
  std::string kind;  // "model", "train", "scene", "stage"
  std::string name;  // stage name, empty otherwise
  std::vector<std::pair<std::string, std::string>> entries;
  mutable std::set<std::string> consumed;

  std::optional<std::string> raw(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::string require_string(const std::string& key) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  // "a,b,c" -> three ints
  std::array<int, 3> get_int3(const std::string& key, std::array<int, 3> fallback) const;
  std::pair<int, int> get_int_pair(const std::string& key, std::pair<int, int> fallback) const;

  std::string label() const;
  void check_consumed() const;  // throws ConfigError naming leftover keys
};

struct ConfigFile {
  std::vector<ConfigSection> sections;

  static ConfigFile parse_text(const std::string& text, const std::string& origin);
  static ConfigFile parse_file(const std::string& path);

  ConfigSection* find(const std::string& kind, const std::string& name = "");
  const ConfigSection* find(const std::string& kind, const std::string& name = "") const;
  std::vector<ConfigSection*> stages();

  // Dotted override "section.key=value" or "stage.NAME.key=value"; the key
  // must resolve to an existing section (stages may also be addressed by
  // index). Returns an error naming the key when it cannot resolve.
  void apply_override(const std::string& dotted_key, const std::string& value);

  void check_all_consumed() const;
};

// Assembled run settings shared by the CLI commands.
struct TrainFileSettings {
  int batch_size = 32;
  int threads = 1;
  int eval_max_samples = 0;
};

ModelConfig model_config_from(ConfigFile& cfg);
SceneSpec scene_spec_from(ConfigFile& cfg, uint64_t default_seed);
TrainFileSettings train_settings_from(ConfigFile& cfg);
std::vector<StageConfig> stages_from(ConfigFile& cfg);

}  // namespace spotter

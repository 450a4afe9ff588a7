#include "spotter/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace spotter {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

}  // namespace

std::string ConfigSection::label() const {
  return kind + (name.empty() ? "" : " " + name);
}

std::optional<std::string> ConfigSection::raw(const std::string& key) const {
  // Later entries override earlier ones.
  std::optional<std::string> found;
  for (const auto& kv : entries)
    if (kv.first == key) found = kv.second;
  if (found.has_value()) consumed.insert(key);
  return found;
}

std::string ConfigSection::get_string(const std::string& key,
                                      const std::string& fallback) const {
  return raw(key).value_or(fallback);
}

std::string ConfigSection::require_string(const std::string& key) const {
  auto v = raw(key);
  if (!v.has_value())
    throw ConfigError("missing required field '" + key + "' in [" + label() + "]");
  return *v;
}

int64_t ConfigSection::get_int(const std::string& key, int64_t fallback) const {
  auto v = raw(key);
  if (!v.has_value()) return fallback;
  try {
    size_t pos = 0;
    const int64_t parsed = std::stoll(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument("trailing characters");
    return parsed;
  } catch (const std::exception&) {
    throw ConfigError("field '" + key + "' in [" + label() + "] is not an integer: " + *v);
  }
}

double ConfigSection::get_double(const std::string& key, double fallback) const {
  auto v = raw(key);
  if (!v.has_value()) return fallback;
  try {
    size_t pos = 0;
    const double parsed = std::stod(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument("trailing characters");
    return parsed;
  } catch (const std::exception&) {
    throw ConfigError("field '" + key + "' in [" + label() + "] is not a number: " + *v);
  }
}

bool ConfigSection::get_bool(const std::string& key, bool fallback) const {
  auto v = raw(key);
  if (!v.has_value()) return fallback;
  if (*v == "true" || *v == "1" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "off") return false;
  throw ConfigError("field '" + key + "' in [" + label() + "] is not a boolean: " + *v);
}

std::array<int, 3> ConfigSection::get_int3(const std::string& key,
                                           std::array<int, 3> fallback) const {
  auto v = raw(key);
  if (!v.has_value()) return fallback;
  const auto parts = split(*v, ',');
  if (parts.size() != 3)
    throw ConfigError("field '" + key + "' in [" + label() + "] needs three values");
  std::array<int, 3> out{};
  for (int i = 0; i < 3; ++i) out[static_cast<size_t>(i)] = std::stoi(parts[static_cast<size_t>(i)]);
  return out;
}

std::pair<int, int> ConfigSection::get_int_pair(const std::string& key,
                                                std::pair<int, int> fallback) const {
  auto v = raw(key);
  if (!v.has_value()) return fallback;
  const auto parts = split(*v, ',');
  if (parts.size() != 2)
    throw ConfigError("field '" + key + "' in [" + label() + "] needs two values");
  return {std::stoi(parts[0]), std::stoi(parts[1])};
}

void ConfigSection::check_consumed() const {
  for (const auto& kv : entries)
    if (consumed.find(kv.first) == consumed.end())
      throw ConfigError("unknown field '" + kv.first + "' in section [" + label() + "]");
}

ConfigFile ConfigFile::parse_text(const std::string& text, const std::string& origin) {
  ConfigFile cfg;
  std::istringstream in(text);
  std::string line;
  ConfigSection* current = nullptr;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": unterminated section header");
      const std::string inner = trim(line.substr(1, line.size() - 2));
      const auto space = inner.find_first_of(" \t");
      ConfigSection sec;
      sec.kind = space == std::string::npos ? inner : trim(inner.substr(0, space));
      sec.name = space == std::string::npos ? "" : trim(inner.substr(space + 1));
      if (sec.kind != "model" && sec.kind != "train" && sec.kind != "scene" &&
          sec.kind != "stage")
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": unknown section [" +
                          inner + "]");
      if (sec.kind == "stage" && sec.name.empty())
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": stage sections need a name");
      cfg.sections.push_back(std::move(sec));
      current = &cfg.sections.back();
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    if (current == nullptr)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": key outside any section");
    current->entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

ConfigFile ConfigFile::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_text(buf.str(), path);
}

ConfigSection* ConfigFile::find(const std::string& kind, const std::string& name) {
  for (auto& s : sections)
    if (s.kind == kind && (name.empty() || s.name == name)) return &s;
  return nullptr;
}

const ConfigSection* ConfigFile::find(const std::string& kind,
                                      const std::string& name) const {
  return const_cast<ConfigFile*>(this)->find(kind, name);
}

std::vector<ConfigSection*> ConfigFile::stages() {
  std::vector<ConfigSection*> out;
  for (auto& s : sections)
    if (s.kind == "stage") out.push_back(&s);
  return out;
}

void ConfigFile::apply_override(const std::string& dotted_key, const std::string& value) {
  const auto parts = split(dotted_key, '.');
  ConfigSection* target = nullptr;
  std::string key;
  if (parts.size() == 2) {
    target = find(parts[0]);
    key = parts[1];
  } else if (parts.size() == 3 && parts[0] == "stage") {
    target = find("stage", parts[1]);
    if (target == nullptr) {
      // Stages may also be addressed by index.
      try {
        const size_t idx = static_cast<size_t>(std::stoul(parts[1]));
        auto st = stages();
        if (idx < st.size()) target = st[idx];
      } catch (const std::exception&) {
      }
    }
    key = parts[2];
  }
  if (target == nullptr)
    throw ConfigError("override '" + dotted_key + "' does not name an existing section");
  // The key must already exist somewhere legal; unknown keys are rejected when
  // the consumer validates, but catch obvious typos right away by requiring
  // the section kind to be real. Replace or append the entry.
  for (auto& kv : target->entries)
    if (kv.first == key) {
      kv.second = value;
      return;
    }
  target->entries.emplace_back(key, value);
}

void ConfigFile::check_all_consumed() const {
  for (const auto& s : sections) s.check_consumed();
}

ModelConfig model_config_from(ConfigFile& cfg) {
  ModelConfig mc;
  ConfigSection* s = cfg.find("model");
  if (s == nullptr) return mc;
  mc.n_regions = static_cast<int>(s->get_int("n_regions", mc.n_regions));
  mc.timesteps = static_cast<int>(s->get_int("timesteps", mc.timesteps));
  mc.alphabet = s->get_string("alphabet", mc.alphabet);
  mc.head = head_kind_from_string(s->get_string("head", to_string(mc.head)));
  mc.loc_filters = s->get_int3("loc_filters", mc.loc_filters);
  mc.rec_filters = s->get_int3("rec_filters", mc.rec_filters);
  mc.blstm_hidden = static_cast<int>(s->get_int("blstm_hidden", mc.blstm_hidden));
  mc.region_h = static_cast<int>(s->get_int("region_h", mc.region_h));
  mc.region_w = static_cast<int>(s->get_int("region_w", mc.region_w));
  mc.input_h = static_cast<int>(s->get_int("input_h", mc.input_h));
  mc.input_w = static_cast<int>(s->get_int("input_w", mc.input_w));
  mc.input_channels = static_cast<int>(s->get_int("input_channels", mc.input_channels));
  mc.disable_rotation_skew = s->get_bool("disable_rotation_skew", mc.disable_rotation_skew);
  mc.validate();
  return mc;
}

namespace {

SceneSpec scene_from_section(const ConfigSection& s, const SceneSpec& base) {
  SceneSpec spec = base;
  spec.canvas_h = static_cast<int>(s.get_int("canvas_h", spec.canvas_h));
  spec.canvas_w = static_cast<int>(s.get_int("canvas_w", spec.canvas_w));
  spec.n_regions = static_cast<int>(s.get_int("n_regions", spec.n_regions));
  spec.placement = placement_from_string(
      s.get_string("placement", to_string(spec.placement)));
  const auto digits = s.get_int_pair("digits", {spec.digits_min, spec.digits_max});
  spec.digits_min = digits.first;
  spec.digits_max = digits.second;
  const auto scale = s.get_int_pair("scale", {spec.scale_min, spec.scale_max});
  spec.scale_min = scale.first;
  spec.scale_max = scale.second;
  spec.noise = s.get_double("noise", spec.noise);
  spec.jitter = static_cast<int>(s.get_int("jitter", spec.jitter));
  spec.contrast_margin = s.get_double("contrast_margin", spec.contrast_margin);
  spec.seed = static_cast<uint64_t>(s.get_int("seed", static_cast<int64_t>(spec.seed)));
  return spec;
}

}  // namespace

SceneSpec scene_spec_from(ConfigFile& cfg, uint64_t default_seed) {
  SceneSpec spec;
  spec.seed = default_seed;
  ConfigSection* s = cfg.find("scene");
  if (s == nullptr) return spec;
  return scene_from_section(*s, spec);
}

TrainFileSettings train_settings_from(ConfigFile& cfg) {
  TrainFileSettings ts;
  ConfigSection* s = cfg.find("train");
  if (s == nullptr) return ts;
  ts.batch_size = static_cast<int>(s->get_int("batch_size", ts.batch_size));
  ts.threads = static_cast<int>(s->get_int("threads", ts.threads));
  ts.eval_max_samples = static_cast<int>(s->get_int("eval_max_samples", ts.eval_max_samples));
  return ts;
}

std::vector<StageConfig> stages_from(ConfigFile& cfg) {
  SceneSpec base = scene_spec_from(cfg, 0);
  std::vector<StageConfig> out;
  for (ConfigSection* s : cfg.stages()) {
    StageConfig st;
    st.name = s->name;
    st.scene = scene_from_section(*s, base);
    st.train_count = static_cast<int>(s->get_int("train_count", st.train_count));
    st.eval_count = static_cast<int>(s->get_int("eval_count", st.eval_count));
    st.data_dir = s->get_string("data", "");
    st.opt.kind = opt_kind_from_string(s->get_string("optimizer", "sgd"));
    st.opt.lr = static_cast<scalar>(s->get_double("lr", 0.01));
    st.opt.momentum = static_cast<scalar>(s->get_double("momentum", 0.9));
    st.opt.beta1 = static_cast<scalar>(s->get_double("beta1", 0.9));
    st.opt.beta2 = static_cast<scalar>(s->get_double("beta2", 0.999));
    st.opt.eps = static_cast<scalar>(s->get_double("adam_eps", 1e-8));
    st.opt.clip_norm = static_cast<scalar>(s->get_double("clip_norm", 10.0));
    st.epochs = static_cast<int>(s->get_int("epochs", st.epochs));
    st.init = init_policy_from_string(
        s->get_string("init", out.empty() ? "fresh" : "carry_all"));
    out.push_back(std::move(st));
  }
  return out;
}

}  // namespace spotter

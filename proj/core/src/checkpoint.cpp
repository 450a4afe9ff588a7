#include "spotter/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <sstream>

namespace spotter {

namespace {

using nlohmann::json;

constexpr int kFormatVersion = 1;
constexpr const char* kMagic = "SPOTTER-CKPT";

json config_to_json(const ModelConfig& c) {
  return json{{"n_regions", c.n_regions},
              {"timesteps", c.timesteps},
              {"alphabet", c.alphabet},
              {"head", to_string(c.head)},
              {"loc_filters", c.loc_filters},
              {"rec_filters", c.rec_filters},
              {"blstm_hidden", c.blstm_hidden},
              {"region_h", c.region_h},
              {"region_w", c.region_w},
              {"input_h", c.input_h},
              {"input_w", c.input_w},
              {"input_channels", c.input_channels},
              {"disable_rotation_skew", c.disable_rotation_skew}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_regions = j.at("n_regions").get<int>();
  c.timesteps = j.at("timesteps").get<int>();
  c.alphabet = j.at("alphabet").get<std::string>();
  c.head = head_kind_from_string(j.at("head").get<std::string>());
  c.loc_filters = j.at("loc_filters").get<std::array<int, 3>>();
  c.rec_filters = j.at("rec_filters").get<std::array<int, 3>>();
  c.blstm_hidden = j.at("blstm_hidden").get<int>();
  c.region_h = j.at("region_h").get<int>();
  c.region_w = j.at("region_w").get<int>();
  c.input_h = j.at("input_h").get<int>();
  c.input_w = j.at("input_w").get<int>();
  c.input_channels = j.at("input_channels").get<int>();
  c.disable_rotation_skew = j.at("disable_rotation_skew").get<bool>();
  return c;
}

struct NamedTensor {
  std::string name;
  std::vector<int64_t> shape;
  const std::vector<scalar>* values;
};

void collect_tensors(const TextSpotter& model, const Optimizer* opt,
                     std::vector<NamedTensor>& out,
                     std::vector<std::vector<scalar>>& owned) {
  model.visit_params([&out](const std::string& name, const Tensor& t) {
    out.push_back({name, t.shape(), &t.data()});
  });
  model.visit_stats([&out](const std::string& name, const RunningStats& s) {
    out.push_back({name + ".running_mean",
                   {static_cast<int64_t>(s.mean.size())}, &s.mean});
    out.push_back({name + ".running_var",
                   {static_cast<int64_t>(s.var.size())}, &s.var});
  });
  if (opt != nullptr) {
    opt->visit_state([&out](const std::string& key, const std::vector<scalar>& buf) {
      out.push_back({"opt." + key, {static_cast<int64_t>(buf.size())}, &buf});
    });
  }
  (void)owned;
}

}  // namespace

void save_checkpoint(const std::string& path, const TextSpotter& model,
                     const Optimizer* optimizer, const TrainerSnapshot* trainer) {
  std::vector<NamedTensor> tensors;
  std::vector<std::vector<scalar>> owned;
  collect_tensors(model, optimizer, tensors, owned);

  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["model"] = config_to_json(model.config());
  manifest["alphabet"] = model.config().alphabet;
  if (optimizer != nullptr) {
    const auto& oc = optimizer->config();
    manifest["optimizer"] = json{{"kind", to_string(oc.kind)},
                                 {"lr", static_cast<double>(oc.lr)},
                                 {"momentum", static_cast<double>(oc.momentum)},
                                 {"beta1", static_cast<double>(oc.beta1)},
                                 {"beta2", static_cast<double>(oc.beta2)},
                                 {"eps", static_cast<double>(oc.eps)},
                                 {"clip_norm", static_cast<double>(oc.clip_norm)},
                                 {"step", optimizer->step_count()}};
  }
  if (trainer != nullptr) {
    manifest["trainer"] = json{{"stage", trainer->stage},
                               {"epoch", trainer->epoch},
                               {"step", trainer->step},
                               {"rng", trainer->rng}};
  }

  json dir = json::array();
  int64_t offset = 0;
  for (const auto& t : tensors) {
    dir.push_back(json{{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += static_cast<int64_t>(t.values->size()) * 4;
  }
  manifest["tensors"] = dir;

  const std::string mtext = manifest.dump();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open checkpoint file for writing: " + path);
  f << kMagic << ' ' << kFormatVersion << ' ' << mtext.size() << '\n';
  f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  std::vector<float> buf;
  for (const auto& t : tensors) {
    buf.resize(t.values->size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>((*t.values)[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * 4));
  }
  if (!f) throw DataError("write failure while saving checkpoint: " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint file: " + path);

  std::string magic;
  int version = 0;
  size_t manifest_size = 0;
  f >> magic >> version >> manifest_size;
  f.get();  // newline
  if (!f || magic != kMagic)
    throw CheckpointError(CheckpointErrorCode::ManifestParse,
                          "not a checkpoint file: " + path);
  if (version != kFormatVersion)
    throw CheckpointError(CheckpointErrorCode::VersionMismatch,
                          "checkpoint format version " + std::to_string(version) +
                              " unsupported (expected " +
                              std::to_string(kFormatVersion) + ")");

  std::string mtext(manifest_size, '\0');
  f.read(mtext.data(), static_cast<std::streamsize>(manifest_size));
  if (f.gcount() != static_cast<std::streamsize>(manifest_size))
    throw CheckpointError(CheckpointErrorCode::Truncated,
                          "checkpoint manifest truncated: " + path);

  json manifest;
  try {
    manifest = json::parse(mtext);
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointErrorCode::ManifestParse,
                          std::string("manifest parse error: ") + e.what());
  }

  CheckpointData data;
  try {
    if (manifest.at("format_version").get<int>() != kFormatVersion)
      throw CheckpointError(CheckpointErrorCode::VersionMismatch,
                            "manifest format_version mismatch");
    data.config = config_from_json(manifest.at("model"));
    if (manifest.contains("optimizer")) {
      const auto& jo = manifest["optimizer"];
      OptimizerSnapshot snap;
      snap.config.kind = opt_kind_from_string(jo.at("kind").get<std::string>());
      snap.config.lr = static_cast<scalar>(jo.at("lr").get<double>());
      snap.config.momentum = static_cast<scalar>(jo.at("momentum").get<double>());
      snap.config.beta1 = static_cast<scalar>(jo.at("beta1").get<double>());
      snap.config.beta2 = static_cast<scalar>(jo.at("beta2").get<double>());
      snap.config.eps = static_cast<scalar>(jo.at("eps").get<double>());
      snap.config.clip_norm = static_cast<scalar>(jo.at("clip_norm").get<double>());
      snap.step = jo.at("step").get<int64_t>();
      data.optimizer = snap;
    }
    if (manifest.contains("trainer")) {
      const auto& jt = manifest["trainer"];
      TrainerSnapshot snap;
      snap.stage = jt.at("stage").get<int>();
      snap.epoch = jt.at("epoch").get<int>();
      snap.step = jt.at("step").get<int64_t>();
      snap.rng = jt.at("rng").get<std::string>();
      data.trainer = snap;
    }

    const std::streampos payload_start = f.tellg();
    for (const auto& entry : manifest.at("tensors")) {
      const std::string name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<std::vector<int64_t>>();
      const int64_t offset = entry.at("offset").get<int64_t>();
      int64_t numel = 1;
      for (int64_t d : shape) numel *= d;
      std::vector<float> raw(static_cast<size_t>(numel));
      f.seekg(payload_start + static_cast<std::streamoff>(offset));
      f.read(reinterpret_cast<char*>(raw.data()),
             static_cast<std::streamsize>(raw.size() * 4));
      if (f.gcount() != static_cast<std::streamsize>(raw.size() * 4))
        throw CheckpointError(CheckpointErrorCode::Truncated,
                              "payload truncated at tensor " + name);
      std::vector<scalar> values(raw.size());
      for (size_t i = 0; i < raw.size(); ++i) values[i] = static_cast<scalar>(raw[i]);
      data.tensors.emplace(name, std::make_pair(shape, std::move(values)));
    }
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointErrorCode::ManifestParse,
                          std::string("manifest field error: ") + e.what());
  }
  return data;
}

void load_into_model(TextSpotter& model, const CheckpointData& data) {
  auto fetch = [&data](const std::string& name, size_t expected,
                       const std::vector<int64_t>* shape) -> const std::vector<scalar>& {
    auto it = data.tensors.find(name);
    if (it == data.tensors.end())
      throw CheckpointError(CheckpointErrorCode::ShapeMismatch,
                            "checkpoint is missing tensor " + name);
    if (shape != nullptr && it->second.first != *shape)
      throw CheckpointError(CheckpointErrorCode::ShapeMismatch,
                            "shape disagreement for tensor " + name);
    if (it->second.second.size() != expected)
      throw CheckpointError(CheckpointErrorCode::ShapeMismatch,
                            "size disagreement for tensor " + name);
    return it->second.second;
  };

  model.visit_params([&fetch](const std::string& name, Tensor& t) {
    t.data() = fetch(name, t.data().size(), &t.shape());
  });
  model.visit_stats([&fetch](const std::string& name, RunningStats& s) {
    s.mean = fetch(name + ".running_mean", s.mean.size(), nullptr);
    s.var = fetch(name + ".running_var", s.var.size(), nullptr);
  });
}

TextSpotter restore_model(const CheckpointData& data) {
  Rng rng(0);  // immediately overwritten
  TextSpotter model = TextSpotter::build(data.config, rng);
  load_into_model(model, data);
  return model;
}

Optimizer restore_optimizer(const CheckpointData& data, TextSpotter& model) {
  if (!data.optimizer.has_value())
    throw CheckpointError(CheckpointErrorCode::ManifestParse,
                          "checkpoint holds no optimizer state");
  Optimizer opt(data.optimizer->config);
  opt.set_step_count(data.optimizer->step);
  model.visit_params([&](const std::string& name, Tensor& t) {
    for (const char* prefix : {"vel.", "m.", "v."}) {
      auto it = data.tensors.find("opt." + std::string(prefix) + name);
      if (it != data.tensors.end()) {
        if (it->second.second.size() != t.data().size())
          throw CheckpointError(CheckpointErrorCode::ShapeMismatch,
                                "optimizer buffer size mismatch for " + name);
        opt.set_state(std::string(prefix) + name, it->second.second);
      }
    }
  });
  return opt;
}

}  // namespace spotter

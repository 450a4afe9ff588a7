#include "spotter/dataset.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

#include "spotter/image_io.hpp"

namespace spotter {

namespace fs = std::filesystem;

Dataset Dataset::load(const std::string& dir) {
  const fs::path root(dir);
  const fs::path labels_path = root / "labels.jsonl";
  if (!fs::exists(labels_path))
    throw DataError("empty dataset: no labels.jsonl under " + dir);

  std::ifstream f(labels_path);
  if (!f) throw DataError("cannot read " + labels_path.string());

  Dataset ds;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed label line " + std::to_string(line_no) + " in " +
                      labels_path.string() + ": " + e.what());
    }
    Record r;
    try {
      const fs::path img = root / j.at("image").get<std::string>();
      r.image_path = img.string();
      r.labels = j.at("labels").get<std::vector<std::string>>();
      if (j.contains("boxes") && !j["boxes"].is_null()) {
        r.boxes = j["boxes"].get<std::vector<std::array<double, 4>>>();
        r.has_boxes = true;
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed label line " + std::to_string(line_no) + " in " +
                      labels_path.string() + ": " + e.what());
    }
    if (!fs::exists(r.image_path))
      throw DataError("labels file references missing image: " + r.image_path);
    ds.records_.push_back(std::move(r));
  }
  if (ds.records_.empty())
    throw DataError("empty dataset: " + labels_path.string() + " holds no samples");
  return ds;
}

Dataset Dataset::from_scenes(std::vector<LabeledScene> scenes) {
  Dataset ds;
  ds.records_.reserve(scenes.size());
  for (auto& s : scenes) {
    Record r;
    r.labels = std::move(s.labels);
    r.boxes = std::move(s.boxes);
    r.has_boxes = !r.boxes.empty();
    r.cached = std::move(s.image);
    ds.records_.push_back(std::move(r));
  }
  return ds;
}

size_t Dataset::size() const { return records_.size(); }

Tensor Dataset::image_of(const Record& r) const {
  if (r.cached.has_value()) return *r.cached;
  return image_to_tensor(read_png(r.image_path));
}

TrainSample Dataset::train_sample(size_t index) const {
  const Record& r = records_.at(index);
  return TrainSample{image_of(r), r.labels};
}

EvalSample Dataset::eval_sample(size_t index) const {
  const Record& r = records_.at(index);
  return EvalSample{image_of(r), r.labels, r.boxes, r.has_boxes};
}

void Dataset::preload() {
  for (auto& r : records_)
    if (!r.cached.has_value()) r.cached = image_to_tensor(read_png(r.image_path));
}

std::vector<size_t> Dataset::shuffled_indices(Rng& rng) const {
  std::vector<size_t> idx(records_.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx.begin(), idx.end());
  return idx;
}

}  // namespace spotter

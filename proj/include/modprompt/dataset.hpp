#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modprompt/image.hpp"
#include "modprompt/scene.hpp"

namespace modprompt {

constexpr const char* kDataSchema = "modprompt-data/1";

struct GenerationConfig {
  std::string root;
  Modality modality = Modality::rgb;
  std::vector<std::string> vocab = default_vocab();
  std::uint64_t seed = 0;
  SceneLimits limits;
  std::map<std::string, int> splits;  // split name -> image count
};

struct DatasetManifest {
  std::string root;
  std::string schema = kDataSchema;
  Modality modality = Modality::rgb;
  std::vector<std::string> vocab;
  std::uint64_t seed = 0;
  SceneLimits limits;
  std::map<std::string, int> splits;
};

struct Sample {
  std::string id;
  Image image;
  GroundTruth gt;
};

namespace detail {

inline std::string sample_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d", index);
  return buf;
}

// Scene seeds depend on (seed, split, index) but never on the modality, so
// datasets generated with the same config are pixel-for-pixel paired in
// their annotations.
inline std::uint64_t scene_seed(std::uint64_t seed, const std::string& split, int index) {
  return hash_combine(hash_combine(seed, hash_str(split)), static_cast<std::uint64_t>(index));
}

inline nlohmann::json limits_to_json(const SceneLimits& l) {
  return {{"canvas_h", l.canvas_h}, {"canvas_w", l.canvas_w},
          {"min_objects", l.min_objects}, {"max_objects", l.max_objects},
          {"min_extent", l.min_extent}, {"max_extent", l.max_extent}};
}

inline SceneLimits limits_from_json(const nlohmann::json& j) {
  SceneLimits l;
  l.canvas_h = j.at("canvas_h").get<int>();
  l.canvas_w = j.at("canvas_w").get<int>();
  l.min_objects = j.at("min_objects").get<int>();
  l.max_objects = j.at("max_objects").get<int>();
  l.min_extent = j.at("min_extent").get<int>();
  l.max_extent = j.at("max_extent").get<int>();
  return l;
}

}  // namespace detail

inline DatasetManifest write_dataset(const GenerationConfig& cfg) {
  namespace fs = std::filesystem;
  if (cfg.splits.empty()) throw std::invalid_argument("write_dataset: no splits configured");
  fs::create_directories(cfg.root);

  for (const auto& [split, count] : cfg.splits) {
    fs::path images = fs::path(cfg.root) / split / "images";
    fs::path annots = fs::path(cfg.root) / split / "annotations";
    fs::create_directories(images);
    fs::create_directories(annots);
    for (int i = 0; i < count; ++i) {
      SceneSpec spec = generate_scene(detail::scene_seed(cfg.seed, split, i), cfg.vocab, cfg.limits);
      Image img = render_modality(spec, cfg.modality);
      GroundTruth gt = ground_truth_for(spec);
      std::string id = detail::sample_id(i);
      write_png((images / (id + ".png")).string(), img.pixels);
      nlohmann::json ann;
      ann["boxes"] = nlohmann::json::array();
      for (const auto& b : gt.boxes) ann["boxes"].push_back({b[0], b[1], b[2], b[3]});
      ann["categories"] = gt.categories;
      std::ofstream f(annots / (id + ".json"));
      f << ann.dump(2) << "\n";
      if (!f) throw std::runtime_error("write_dataset: failed writing annotation " + id);
    }
  }

  DatasetManifest m;
  m.root = cfg.root;
  m.modality = cfg.modality;
  m.vocab = cfg.vocab;
  m.seed = cfg.seed;
  m.limits = cfg.limits;
  m.splits = cfg.splits;

  nlohmann::json j;
  j["schema"] = kDataSchema;
  j["modality"] = modality_name(cfg.modality);
  j["vocab"] = cfg.vocab;
  j["seed"] = cfg.seed;
  j["limits"] = detail::limits_to_json(cfg.limits);
  j["splits"] = cfg.splits;
  std::ofstream f(fs::path(cfg.root) / "manifest.json");
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("write_dataset: failed writing manifest");
  return m;
}

inline DatasetManifest load_manifest(const std::string& root) {
  namespace fs = std::filesystem;
  fs::path mp = fs::path(root) / "manifest.json";
  std::ifstream f(mp);
  if (!f) throw std::runtime_error("load_manifest: missing " + mp.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_manifest: invalid JSON in " + mp.string() + ": " + e.what());
  }
  if (j.value("schema", "") != kDataSchema)
    throw std::runtime_error("load_manifest: unsupported schema in " + mp.string());
  DatasetManifest m;
  m.root = root;
  m.modality = modality_from_name(j.at("modality").get<std::string>());
  m.vocab = j.at("vocab").get<std::vector<std::string>>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.limits = detail::limits_from_json(j.at("limits"));
  m.splits = j.at("splits").get<std::map<std::string, int>>();
  return m;
}

// Loads one split eagerly; errors name the offending record.
inline std::vector<Sample> load_split(const std::string& root, const std::string& split) {
  namespace fs = std::filesystem;
  DatasetManifest m = load_manifest(root);
  auto it = m.splits.find(split);
  if (it == m.splits.end())
    throw std::runtime_error("load_split: split '" + split + "' not in manifest of " + root);

  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(it->second));
  for (int i = 0; i < it->second; ++i) {
    std::string id = detail::sample_id(i);
    fs::path ip = fs::path(root) / split / "images" / (id + ".png");
    fs::path ap = fs::path(root) / split / "annotations" / (id + ".json");
    if (!fs::exists(ip)) throw std::runtime_error("load_split: missing image " + ip.string());
    std::ifstream af(ap);
    if (!af) throw std::runtime_error("load_split: missing annotation " + ap.string());
    nlohmann::json ann;
    try {
      af >> ann;
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_split: corrupt annotation " + ap.string() + ": " + e.what());
    }

    Sample s;
    s.id = id;
    s.image.pixels = read_png(ip.string());
    s.image.modality = m.modality;
    try {
      for (const auto& b : ann.at("boxes")) {
        if (b.size() != 4) throw std::runtime_error("box is not 4 numbers");
        std::array<double, 4> box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                                     b[3].get<double>()};
        if (!(box[0] < box[2] && box[1] < box[3])) throw std::runtime_error("degenerate box");
        s.gt.boxes.push_back(box);
      }
      s.gt.categories = ann.at("categories").get<std::vector<std::string>>();
      if (s.gt.categories.size() != s.gt.boxes.size())
        throw std::runtime_error("boxes/categories length mismatch");
    } catch (const std::exception& e) {
      throw std::runtime_error("load_split: corrupt annotation " + ap.string() + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace modprompt

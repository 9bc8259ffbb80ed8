#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "signforge/attack.hpp"
#include "signforge/detector.hpp"
#include "signforge/scene.hpp"

namespace signforge::cli {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& path, const std::string& message)
      : std::runtime_error("config error at " + path + ": " + message), json_path(path) {}
  std::string json_path;
};

struct TrainSettings {
  int epochs = 4;
  double lr = 0.01;
  std::size_t batch = 16;
  std::size_t dataset_size = 2000;
};

struct EvalSettings {
  std::string mode = "disappearance";  // disappearance | creation
  std::size_t placements = 100;        // creation-mode scene count
};

struct PathSettings {
  std::string model;
  std::string model_b;
  std::string delta;
  std::string data;
};

// Pose sampling used while optimizing perturbations; narrower than the
// training distribution so evaluation sweeps stay held-out.
inline scene::SceneDistribution attack_scene_defaults() {
  scene::SceneDistribution d;
  d.rotation_deg = {-20.0, 20.0};
  d.translate_x = {0.3, 0.7};
  d.translate_y = {0.3, 0.7};
  d.scale = {0.12, 0.58};
  d.gain = {0.7, 1.3};
  d.background_seed = 7;
  d.background_count = 32;
  return d;
}

// Patch placement for the creation attack: anywhere in the middle of the
// frame at sticker-like sizes.
inline scene::SceneDistribution creation_scene_defaults() {
  scene::SceneDistribution d;
  d.rotation_deg = {-20.0, 20.0};
  d.translate_x = {0.25, 0.75};
  d.translate_y = {0.25, 0.75};
  d.scale = {0.18, 0.38};
  d.gain = {0.7, 1.3};
  d.background_seed = 19;
  d.background_count = 32;
  return d;
}

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out = "out";
  det::DetectorConfig detector;
  det::Arch arch = det::Arch::kTiny4;
  scene::SceneDistribution scene_dist;  // dataset distribution
  TrainSettings train;
  attack::AttackConfig attack;
  std::string attack_mask = "two-bar-sticker";  // octagon-poster | two-bar-sticker
  std::size_t patch_size = 32;
  scene::SweepConfig sweep;
  std::string environment = "indoor-analog";
  EvalSettings eval;
  PathSettings paths;
  bool attack_scene_overridden = false;  // /attack/scene given explicitly

  RunConfig() { attack.dist = attack_scene_defaults(); }
};

namespace detail {

using nlohmann::json;

inline void expect_keys(const json& obj, const std::string& path,
                        const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ConfigError(path.empty() ? "/" : path, "expected an object");
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key)) throw ConfigError(path + "/" + key, "unknown key");
}

inline double get_num(const json& obj, const std::string& path, const char* key,
                      double fallback, double lo, double hi) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number()) throw ConfigError(path + "/" + key, "expected a number");
  double d = v.get<double>();
  if (d < lo || d > hi)
    throw ConfigError(path + "/" + key,
                      "value " + std::to_string(d) + " outside [" + std::to_string(lo) +
                          ", " + std::to_string(hi) + "]");
  return d;
}

inline std::int64_t get_int(const json& obj, const std::string& path, const char* key,
                            std::int64_t fallback, std::int64_t lo, std::int64_t hi) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer())
    throw ConfigError(path + "/" + key, "expected an integer");
  auto d = v.get<std::int64_t>();
  if (d < lo || d > hi)
    throw ConfigError(path + "/" + key,
                      "value " + std::to_string(d) + " outside [" + std::to_string(lo) +
                          ", " + std::to_string(hi) + "]");
  return d;
}

inline std::uint64_t get_u64(const json& obj, const std::string& path, const char* key,
                             std::uint64_t fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_unsigned() && !v.is_number_integer())
    throw ConfigError(path + "/" + key, "expected an unsigned integer");
  return v.get<std::uint64_t>();
}

inline std::string get_str(const json& obj, const std::string& path, const char* key,
                           std::string fallback,
                           const std::set<std::string>& allowed = {}) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_string()) throw ConfigError(path + "/" + key, "expected a string");
  std::string s = v.get<std::string>();
  if (!allowed.empty() && !allowed.count(s))
    throw ConfigError(path + "/" + key, "unsupported value '" + s + "'");
  return s;
}

inline scene::Range get_range(const json& obj, const std::string& path, const char* key,
                              scene::Range fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
    throw ConfigError(path + "/" + key, "expected [lo, hi]");
  scene::Range r{v[0].get<double>(), v[1].get<double>()};
  if (r.hi < r.lo) throw ConfigError(path + "/" + key, "hi must be >= lo");
  return r;
}

inline void parse_detector(const json& obj, const std::string& path, RunConfig& cfg) {
  expect_keys(obj, path,
              {"grid", "boxes", "classes", "input_size", "anchors", "score_threshold",
               "nms_iou_threshold", "arch"});
  det::DetectorConfig& d = cfg.detector;
  d.grid = static_cast<std::size_t>(get_int(obj, path, "grid", static_cast<std::int64_t>(d.grid), 1, 64));
  d.boxes = static_cast<std::size_t>(get_int(obj, path, "boxes", static_cast<std::int64_t>(d.boxes), 1, 16));
  d.classes = static_cast<std::size_t>(
      get_int(obj, path, "classes", static_cast<std::int64_t>(d.classes), 1, 256));
  d.input_size = static_cast<std::size_t>(
      get_int(obj, path, "input_size", static_cast<std::int64_t>(d.input_size), 16, 1024));
  if (obj.contains("anchors")) {
    const json& a = obj.at("anchors");
    if (!a.is_array() || a.empty())
      throw ConfigError(path + "/anchors", "expected a non-empty array of [w, h] pairs");
    d.anchors.clear();
    for (std::size_t i = 0; i < a.size(); ++i) {
      const json& p = a[i];
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
        throw ConfigError(path + "/anchors/" + std::to_string(i), "expected [w, h]");
      double w = p[0].get<double>(), h = p[1].get<double>();
      if (!(w > 0) || !(h > 0))
        throw ConfigError(path + "/anchors/" + std::to_string(i), "anchors must be positive");
      d.anchors.push_back({w, h});
    }
  }
  double st = get_num(obj, path, "score_threshold", d.score_threshold, 0.0, 1.0);
  if (obj.contains("score_threshold") && (st <= 0.0 || st >= 1.0))
    throw ConfigError(path + "/score_threshold", "must be strictly inside (0,1)");
  d.score_threshold = st;
  double nt = get_num(obj, path, "nms_iou_threshold", d.nms_iou_threshold, 0.0, 1.0);
  if (obj.contains("nms_iou_threshold") && (nt <= 0.0 || nt >= 1.0))
    throw ConfigError(path + "/nms_iou_threshold", "must be strictly inside (0,1)");
  d.nms_iou_threshold = nt;
  std::string arch = get_str(obj, path, "arch", det::arch_name(cfg.arch),
                             {"tiny4", "tiny4-b32"});
  cfg.arch = arch == "tiny4" ? det::Arch::kTiny4 : det::Arch::kTiny4B32;
  try {
    d.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
}

inline void parse_scene_dist(const json& obj, const std::string& path,
                             scene::SceneDistribution& d) {
  expect_keys(obj, path,
              {"rotation_deg", "translate_x", "translate_y", "scale", "gain",
               "background_seed", "background_count"});
  d.rotation_deg = get_range(obj, path, "rotation_deg", d.rotation_deg);
  d.translate_x = get_range(obj, path, "translate_x", d.translate_x);
  d.translate_y = get_range(obj, path, "translate_y", d.translate_y);
  d.scale = get_range(obj, path, "scale", d.scale);
  d.gain = get_range(obj, path, "gain", d.gain);
  d.background_seed = get_u64(obj, path, "background_seed", d.background_seed);
  d.background_count = static_cast<std::size_t>(get_int(
      obj, path, "background_count", static_cast<std::int64_t>(d.background_count), 1, 4096));
  try {
    d.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
}

inline void parse_train(const json& obj, const std::string& path, TrainSettings& t) {
  expect_keys(obj, path, {"epochs", "lr", "batch", "dataset_size"});
  t.epochs = static_cast<int>(get_int(obj, path, "epochs", t.epochs, 0, 1000000));
  t.lr = get_num(obj, path, "lr", t.lr, 1e-9, 10.0);
  t.batch = static_cast<std::size_t>(
      get_int(obj, path, "batch", static_cast<std::int64_t>(t.batch), 1, 4096));
  t.dataset_size = static_cast<std::size_t>(get_int(
      obj, path, "dataset_size", static_cast<std::int64_t>(t.dataset_size), 1, 1000000));
}

inline void parse_attack(const json& obj, const std::string& path, RunConfig& cfg) {
  expect_keys(obj, path,
              {"tv_weight", "nps_weight", "tau", "target_class", "epochs", "batch", "lr",
               "mask", "patch_size", "score_mode", "smooth_max",
               "smooth_max_sharpness", "scene"});
  attack::AttackConfig& a = cfg.attack;
  a.tv_weight = get_num(obj, path, "tv_weight", a.tv_weight, 0.0, 1e9);
  a.nps_weight = get_num(obj, path, "nps_weight", a.nps_weight, 0.0, 1e9);
  double tau = get_num(obj, path, "tau", a.tau, 0.0, 1.0);
  if (obj.contains("tau") && (tau <= 0.0 || tau >= 1.0))
    throw ConfigError(path + "/tau", "must be strictly inside (0,1)");
  a.tau = tau;
  a.target_class = static_cast<int>(get_int(obj, path, "target_class", a.target_class, 0, 255));
  a.epochs = static_cast<int>(get_int(obj, path, "epochs", a.epochs, 0, 1000000));
  a.batch = static_cast<std::size_t>(
      get_int(obj, path, "batch", static_cast<std::int64_t>(a.batch), 1, 4096));
  a.lr = get_num(obj, path, "lr", a.lr, 1e-9, 10.0);
  cfg.attack_mask = get_str(obj, path, "mask", cfg.attack_mask,
                            {"octagon-poster", "two-bar-sticker"});
  cfg.patch_size = static_cast<std::size_t>(get_int(
      obj, path, "patch_size", static_cast<std::int64_t>(cfg.patch_size), 4, 512));
  std::string mode = get_str(obj, path, "score_mode",
                             a.score_mode == det::ScoreMode::kProduct ? "product" : "conditional",
                             {"product", "conditional"});
  a.score_mode = mode == "product" ? det::ScoreMode::kProduct : det::ScoreMode::kConditional;
  if (obj.contains("smooth_max")) {
    if (!obj.at("smooth_max").is_boolean())
      throw ConfigError(path + "/smooth_max", "expected a boolean");
    a.smooth_max = obj.at("smooth_max").get<bool>();
  }
  a.smooth_max_sharpness =
      get_num(obj, path, "smooth_max_sharpness", a.smooth_max_sharpness, 1e-3, 1e6);
  if (obj.contains("scene")) {
    parse_scene_dist(obj.at("scene"), path + "/scene", a.dist);
    cfg.attack_scene_overridden = true;
  }
}

inline void parse_sweep(const json& obj, const std::string& path, RunConfig& cfg) {
  expect_keys(obj, path,
              {"environment", "n_frames", "scale_far", "scale_near", "lateral_drift",
               "rotation_jitter", "translate_jitter", "gain", "background_seed",
               "background_count"});
  cfg.environment = get_str(obj, path, "environment", cfg.environment,
                            {"indoor-analog", "outdoor-analog"});
  scene::SweepConfig base = cfg.environment == "indoor-analog" ? scene::indoor_sweep()
                                                               : scene::outdoor_sweep();
  base.scene_size = cfg.sweep.scene_size;
  base.n_frames = static_cast<std::size_t>(get_int(
      obj, path, "n_frames", static_cast<std::int64_t>(base.n_frames), 1, 100000));
  base.scale_far = get_num(obj, path, "scale_far", base.scale_far, 1e-3, 1.0);
  base.scale_near = get_num(obj, path, "scale_near", base.scale_near, 1e-3, 1.0);
  base.lateral_drift = get_num(obj, path, "lateral_drift", base.lateral_drift, 0.0, 2.0);
  base.rotation_jitter = get_range(obj, path, "rotation_jitter", base.rotation_jitter);
  base.translate_jitter = get_range(obj, path, "translate_jitter", base.translate_jitter);
  base.gain = get_range(obj, path, "gain", base.gain);
  base.background_seed = get_u64(obj, path, "background_seed", base.background_seed);
  base.background_count = static_cast<std::size_t>(get_int(
      obj, path, "background_count", static_cast<std::int64_t>(base.background_count), 1, 4096));
  cfg.sweep = base;
}

inline void parse_eval(const json& obj, const std::string& path, EvalSettings& e) {
  expect_keys(obj, path, {"mode", "placements"});
  e.mode = get_str(obj, path, "mode", e.mode, {"disappearance", "creation"});
  e.placements = static_cast<std::size_t>(get_int(
      obj, path, "placements", static_cast<std::int64_t>(e.placements), 1, 100000));
}

inline void parse_paths(const json& obj, const std::string& path, PathSettings& p) {
  expect_keys(obj, path, {"model", "model_b", "delta", "data"});
  p.model = get_str(obj, path, "model", p.model);
  p.model_b = get_str(obj, path, "model_b", p.model_b);
  p.delta = get_str(obj, path, "delta", p.delta);
  p.data = get_str(obj, path, "data", p.data);
}

}  // namespace detail

// Strict parse: unknown keys anywhere are rejected with their JSON path;
// omitted keys take the module defaults.
inline RunConfig parse_config_text(const std::string& text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("/", std::string("malformed JSON: ") + e.what());
  }
  RunConfig cfg;
  detail::expect_keys(root, "",
                      {"seed", "out", "detector", "scene", "train", "attack", "sweep",
                       "eval", "paths"});
  cfg.seed = detail::get_u64(root, "", "seed", cfg.seed);
  cfg.out = detail::get_str(root, "", "out", cfg.out);
  if (root.contains("detector")) detail::parse_detector(root.at("detector"), "/detector", cfg);
  if (root.contains("scene"))
    detail::parse_scene_dist(root.at("scene"), "/scene", cfg.scene_dist);
  if (root.contains("train")) detail::parse_train(root.at("train"), "/train", cfg.train);
  if (root.contains("attack")) detail::parse_attack(root.at("attack"), "/attack", cfg);
  cfg.sweep.scene_size = cfg.detector.input_size;
  if (root.contains("sweep")) {
    detail::parse_sweep(root.at("sweep"), "/sweep", cfg);
  } else {
    scene::SweepConfig base = cfg.environment == "indoor-analog" ? scene::indoor_sweep()
                                                                 : scene::outdoor_sweep();
    base.scene_size = cfg.detector.input_size;
    cfg.sweep = base;
  }
  if (root.contains("eval")) detail::parse_eval(root.at("eval"), "/eval", cfg.eval);
  if (root.contains("paths")) detail::parse_paths(root.at("paths"), "/paths", cfg.paths);
  return cfg;
}

inline RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("parse_config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// Effective configuration echoed back as JSON (sorted keys, stable).
inline nlohmann::json config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["seed"] = cfg.seed;
  j["out"] = cfg.out;
  nlohmann::json det;
  det["grid"] = cfg.detector.grid;
  det["boxes"] = cfg.detector.boxes;
  det["classes"] = cfg.detector.classes;
  det["input_size"] = cfg.detector.input_size;
  nlohmann::json anchors = nlohmann::json::array();
  for (const auto& a : cfg.detector.anchors) anchors.push_back({a[0], a[1]});
  det["anchors"] = anchors;
  det["score_threshold"] = cfg.detector.score_threshold;
  det["nms_iou_threshold"] = cfg.detector.nms_iou_threshold;
  det["arch"] = det::arch_name(cfg.arch);
  j["detector"] = det;
  auto range = [](const scene::Range& r) { return nlohmann::json{r.lo, r.hi}; };
  auto dist_json = [&](const scene::SceneDistribution& d) {
    nlohmann::json s;
    s["rotation_deg"] = range(d.rotation_deg);
    s["translate_x"] = range(d.translate_x);
    s["translate_y"] = range(d.translate_y);
    s["scale"] = range(d.scale);
    s["gain"] = range(d.gain);
    s["background_seed"] = d.background_seed;
    s["background_count"] = d.background_count;
    return s;
  };
  j["scene"] = dist_json(cfg.scene_dist);
  nlohmann::json tr;
  tr["epochs"] = cfg.train.epochs;
  tr["lr"] = cfg.train.lr;
  tr["batch"] = cfg.train.batch;
  tr["dataset_size"] = cfg.train.dataset_size;
  j["train"] = tr;
  nlohmann::json at;
  at["tv_weight"] = cfg.attack.tv_weight;
  at["nps_weight"] = cfg.attack.nps_weight;
  at["tau"] = cfg.attack.tau;
  at["target_class"] = cfg.attack.target_class;
  at["epochs"] = cfg.attack.epochs;
  at["batch"] = cfg.attack.batch;
  at["lr"] = cfg.attack.lr;
  at["mask"] = cfg.attack_mask;
  at["patch_size"] = cfg.patch_size;
  at["score_mode"] =
      cfg.attack.score_mode == det::ScoreMode::kProduct ? "product" : "conditional";
  at["smooth_max"] = cfg.attack.smooth_max;
  at["smooth_max_sharpness"] = cfg.attack.smooth_max_sharpness;
  at["scene"] = dist_json(cfg.attack.dist);
  j["attack"] = at;
  nlohmann::json sw;
  sw["environment"] = cfg.environment;
  sw["n_frames"] = cfg.sweep.n_frames;
  sw["scale_far"] = cfg.sweep.scale_far;
  sw["scale_near"] = cfg.sweep.scale_near;
  sw["lateral_drift"] = cfg.sweep.lateral_drift;
  sw["rotation_jitter"] = range(cfg.sweep.rotation_jitter);
  sw["translate_jitter"] = range(cfg.sweep.translate_jitter);
  sw["gain"] = range(cfg.sweep.gain);
  sw["background_seed"] = cfg.sweep.background_seed;
  sw["background_count"] = cfg.sweep.background_count;
  j["sweep"] = sw;
  nlohmann::json ev;
  ev["mode"] = cfg.eval.mode;
  ev["placements"] = cfg.eval.placements;
  j["eval"] = ev;
  nlohmann::json pa;
  pa["model"] = cfg.paths.model;
  pa["model_b"] = cfg.paths.model_b;
  pa["delta"] = cfg.paths.delta;
  pa["data"] = cfg.paths.data;
  j["paths"] = pa;
  return j;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string config_hash(const RunConfig& cfg) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(config_to_json(cfg).dump())));
  return buf;
}

}  // namespace signforge::cli

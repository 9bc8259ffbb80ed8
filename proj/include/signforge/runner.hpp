#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "signforge/attack.hpp"
#include "signforge/config.hpp"
#include "signforge/evalharness.hpp"
#include "signforge/model_io.hpp"
#include "signforge/ppm.hpp"
#include "signforge/scene.hpp"
#include "signforge/trainer.hpp"

namespace signforge::cli {

namespace fs = std::filesystem;

// Collects artifact paths for the run manifest; every file a command
// writes goes through here.
class ArtifactSink {
 public:
  ArtifactSink(fs::path out_dir, std::string command, const RunConfig& cfg)
      : dir_(std::move(out_dir)), command_(std::move(command)), cfg_(cfg) {
    fs::create_directories(dir_);
  }

  fs::path path(const std::string& name) {
    names_.push_back(name);
    fs::path p = dir_ / name;
    fs::create_directories(p.parent_path());
    return p;
  }

  const fs::path& dir() const { return dir_; }

  void finish() const {
    nlohmann::json m;
    m["command"] = command_;
    m["config_hash"] = config_hash(cfg_);
    m["seed"] = cfg_.seed;
    m["artifacts"] = names_;
    std::ofstream out(dir_ / "manifest.json", std::ios::binary);
    out << m.dump(2) << '\n';
  }

 private:
  fs::path dir_;
  std::string command_;
  const RunConfig& cfg_;
  std::vector<std::string> names_;
};

inline void write_trace_csv(const std::vector<attack::TraceRow>& trace,
                            const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  out << "epoch,J_term,TV_term,NPS_term,total\n";
  char buf[160];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.j_term,
                  r.tv_term, r.nps_term, r.total);
    out << buf;
  }
}

inline Tensor mask_for_tag(const std::string& tag, const scene::CanonicalObject& obj) {
  if (tag == "octagon-poster") return attack::poster_mask(obj);
  if (tag == "two-bar-sticker") return attack::two_bar_mask(obj);
  throw std::runtime_error("unknown mask tag '" + tag + "'");
}

inline det::DetectorModel load_model(const std::string& path, const char* which) {
  if (path.empty())
    throw std::runtime_error(std::string("missing required path: ") + which);
  return read_model(path);
}

namespace commands {

inline void gen_data(const RunConfig& cfg, ArtifactSink& sink, std::ostream& log) {
  auto dataset = scene::synth_dataset(cfg.train.dataset_size, cfg.scene_dist,
                                      cfg.detector.input_size, cfg.seed);
  nlohmann::json labels;
  labels["image_size"] = cfg.detector.input_size;
  nlohmann::json scenes = nlohmann::json::array();
  char name[64];
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    std::snprintf(name, sizeof name, "scenes/scene_%05zu.ppm", i);
    write_ppm(dataset[i].image, sink.path(name).string());
    nlohmann::json s;
    s["file"] = name;
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : dataset[i].objects)
      objs.push_back({{"class_id", o.class_id},
                      {"cx", o.box.cx},
                      {"cy", o.box.cy},
                      {"w", o.box.w},
                      {"h", o.box.h}});
    s["objects"] = objs;
    scenes.push_back(std::move(s));
  }
  labels["scenes"] = std::move(scenes);
  std::ofstream out(sink.path("labels.json"), std::ios::binary);
  out << labels.dump(2) << '\n';
  log << "gen-data: wrote " << dataset.size() << " scenes\n";
}

inline std::vector<det::LabeledScene> load_dataset(const std::string& data_dir) {
  if (data_dir.empty()) throw std::runtime_error("missing required path: data");
  fs::path dir(data_dir);
  std::ifstream in(dir / "labels.json");
  if (!in) throw std::runtime_error("cannot open " + (dir / "labels.json").string());
  nlohmann::json labels = nlohmann::json::parse(in);
  const auto& scenes = labels.at("scenes");
  std::vector<det::LabeledScene> dataset(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    const auto& s = scenes[i];
    det::LabeledScene scene;
    scene.image = read_ppm((dir / s.at("file").get<std::string>()).string());
    for (const auto& o : s.at("objects")) {
      det::LabeledObject obj;
      obj.class_id = o.at("class_id").get<int>();
      obj.box = Box{o.at("cx").get<double>(), o.at("cy").get<double>(),
                    o.at("w").get<double>(), o.at("h").get<double>()};
      scene.objects.push_back(obj);
    }
    dataset[i] = std::move(scene);
  });
  return dataset;
}

inline void train(const RunConfig& cfg, ArtifactSink& sink, std::ostream& log) {
  auto dataset = load_dataset(cfg.paths.data);
  log << "train: " << dataset.size() << " scenes, " << cfg.train.epochs << " epochs\n";
  det::DetectorModel model = det::train_toy(
      cfg.detector, cfg.arch, dataset, cfg.seed, cfg.train.epochs, cfg.train.lr,
      cfg.train.batch,
      [&](int epoch, double loss) { log << "epoch " << epoch << " loss " << loss << "\n"; });
  write_model(model, sink.path("model.mdet").string());
  log << "train: wrote model.mdet\n";
}

inline void attack_disappear(const RunConfig& cfg, ArtifactSink& sink, std::ostream& log) {
  det::DetectorModel model = load_model(cfg.paths.model, "model");
  scene::CanonicalObject obj = scene::make_canonical(cfg.attack.target_class);
  attack::PerturbationSpec init =
      attack::zero_perturbation(mask_for_tag(cfg.attack_mask, obj), cfg.attack_mask);
  attack::AttackConfig acfg = cfg.attack;
  acfg.seed = cfg.seed;
  std::vector<attack::TraceRow> partial;
  attack::AttackResult res;
  try {
    res = attack::optimize_disappearance(
        obj, std::move(init), acfg, model,
        [&](int epoch, const attack::PerturbationSpec&, const attack::TraceRow& row) {
          if (epoch % 50 == 0 || epoch + 1 == acfg.epochs)
            log << "epoch " << epoch << " J " << row.j_term << " total " << row.total << "\n";
        });
  } catch (const attack::AttackDiverged& e) {
    write_trace_csv(e.trace, sink.path("trace.csv"));
    sink.finish();
    throw;
  }
  write_delta(res.perturbation.delta, sink.path("delta.pert").string());
  write_ppm_gray(res.perturbation.mask, sink.path("mask.ppm").string());
  {
    ad::Graph g;
    ad::Var pobj = scene::perturbed_object(g, obj, g.constant(res.perturbation.delta),
                                           res.perturbation.mask);
    write_ppm(g.value(pobj), sink.path("perturbed_object.ppm").string());
  }
  write_trace_csv(res.trace, sink.path("trace.csv"));
  log << "attack-disappear: final J " << (res.trace.empty() ? 0.0 : res.trace.back().j_term)
      << "\n";
}

inline void attack_create(const RunConfig& cfg, ArtifactSink& sink, std::ostream& log) {
  det::DetectorModel model = load_model(cfg.paths.model, "model");
  attack::AttackConfig acfg = cfg.attack;
  acfg.seed = cfg.seed;
  if (!cfg.attack_scene_overridden) acfg.dist = creation_scene_defaults();
  attack::AttackResult res;
  try {
    res = attack::optimize_creation(
        cfg.patch_size, acfg, model,
        [&](int epoch, const attack::PerturbationSpec&, const attack::TraceRow& row) {
          if (epoch % 50 == 0 || epoch + 1 == acfg.epochs)
            log << "epoch " << epoch << " J " << row.j_term << " total " << row.total << "\n";
        });
  } catch (const attack::AttackDiverged& e) {
    write_trace_csv(e.trace, sink.path("trace.csv"));
    sink.finish();
    throw;
  }
  write_delta(res.perturbation.delta, sink.path("patch_delta.pert").string());
  {
    scene::CanonicalObject patch = scene::make_patch(cfg.patch_size);
    ad::Graph g;
    ad::Var p = scene::perturbed_object(g, patch, g.constant(res.perturbation.delta),
                                        res.perturbation.mask);
    write_ppm(g.value(p), sink.path("patch.ppm").string());
  }
  write_trace_csv(res.trace, sink.path("trace.csv"));
  log << "attack-create: final J " << (res.trace.empty() ? 0.0 : res.trace.back().j_term)
      << "\n";
}

// Single patch placements on held-out backgrounds; placement i draws
// from stream (seed, i).
inline std::vector<Tensor> creation_frames(const RunConfig& cfg,
                                           const scene::SceneDistribution& dist,
                                           const Tensor* delta, std::size_t count,
                                           std::uint64_t seed) {
  std::size_t size = cfg.detector.input_size;
  std::vector<Tensor> bgs = scene::make_background_set(cfg.sweep.background_count, size,
                                                       cfg.sweep.background_seed);
  scene::CanonicalObject patch =
      delta ? scene::make_patch(delta->dim(0)) : scene::make_patch(cfg.patch_size);
  Tensor mask = patch.alpha;
  std::vector<Tensor> frames(count);
  parallel_for(count, [&](std::size_t i) {
    Pcg32 rng(seed, i);
    const Tensor& bg = bgs[rng.next_below(static_cast<std::uint32_t>(bgs.size()))];
    scene::TransformSample t = scene::sample_transform(dist, rng);
    double gain = scene::sample(dist.gain, rng);
    if (!delta) {
      frames[i] = bg;
      return;
    }
    ad::Graph g;
    ad::Var out = scene::perturbed_scene(g, bg, patch, g.constant(*delta), mask, t, gain);
    frames[i] = g.value(out);
  });
  return frames;
}

inline void eval(const RunConfig& cfg, ArtifactSink& sink, std::ostream& log) {
  det::DetectorModel model = load_model(cfg.paths.model, "model");
  if (cfg.eval.mode == "disappearance") {
    scene::CanonicalObject obj = scene::make_canonical(cfg.attack.target_class);
    std::vector<Tensor> frames;
    if (!cfg.paths.delta.empty()) {
      Tensor delta = read_delta(cfg.paths.delta);
      Tensor mask = mask_for_tag(cfg.attack_mask, obj);
      frames = scene::render_sweep(obj, &mask, &delta, cfg.sweep, cfg.seed);
    } else {
      frames = scene::render_sweep(obj, nullptr, nullptr, cfg.sweep, cfg.seed);
    }
    auto report = evalharness::eval_disappearance(model, frames, cfg.attack.target_class,
                                                  cfg.environment, cfg.paths.model);
    evalharness::write_report(report, sink.path("report.csv").string(),
                              evalharness::ReportFormat::kCsv);
    evalharness::write_report(report, sink.path("report.json").string(),
                              evalharness::ReportFormat::kJson);
    log << evalharness::summary_line(report) << "\n";
  } else {
    if (cfg.paths.delta.empty()) throw std::runtime_error("missing required path: delta");
    Tensor delta = read_delta(cfg.paths.delta);
    scene::SceneDistribution dist =
        cfg.attack_scene_overridden ? cfg.attack.dist : creation_scene_defaults();
    auto frames = creation_frames(cfg, dist, &delta, cfg.eval.placements, cfg.seed);
    auto report = evalharness::eval_creation(model, frames, cfg.attack.target_class,
                                             cfg.environment, cfg.paths.model);
    auto clean = creation_frames(cfg, dist, nullptr, cfg.eval.placements, cfg.seed);
    auto clean_report = evalharness::eval_creation(model, clean, cfg.attack.target_class,
                                                   cfg.environment, cfg.paths.model);
    evalharness::write_report(report, sink.path("report.csv").string(),
                              evalharness::ReportFormat::kCsv);
    evalharness::write_report(report, sink.path("report.json").string(),
                              evalharness::ReportFormat::kJson);
    evalharness::write_report(clean_report, sink.path("report_clean.json").string(),
                              evalharness::ReportFormat::kJson);
    log << "patch: " << evalharness::summary_line(report) << "\n";
    log << "clean: " << evalharness::summary_line(clean_report) << "\n";
  }
}

inline void transfer(const RunConfig& cfg, ArtifactSink& sink, std::ostream& log) {
  det::DetectorModel model_a = load_model(cfg.paths.model, "model");
  det::DetectorModel model_b = load_model(cfg.paths.model_b, "model_b");
  if (cfg.paths.delta.empty()) throw std::runtime_error("missing required path: delta");
  scene::CanonicalObject obj = scene::make_canonical(cfg.attack.target_class);
  attack::PerturbationSpec pert;
  pert.delta = read_delta(cfg.paths.delta);
  pert.mask = mask_for_tag(cfg.attack_mask, obj);
  pert.shape_tag = cfg.attack_mask;
  auto rep = evalharness::eval_transfer(obj, pert, model_a, cfg.paths.model, model_b,
                                        cfg.paths.model_b, cfg.sweep, cfg.seed,
                                        cfg.attack.target_class, cfg.environment);
  evalharness::write_report(rep.source_report, sink.path("report_a.json").string(),
                            evalharness::ReportFormat::kJson);
  evalharness::write_report(rep.source_report, sink.path("report_a.csv").string(),
                            evalharness::ReportFormat::kCsv);
  evalharness::write_report(rep.target_report, sink.path("report_b.json").string(),
                            evalharness::ReportFormat::kJson);
  evalharness::write_report(rep.target_report, sink.path("report_b.csv").string(),
                            evalharness::ReportFormat::kCsv);
  log << "A: " << evalharness::summary_line(rep.source_report) << "\n";
  log << "B: " << evalharness::summary_line(rep.target_report) << "\n";
}

inline void render(const RunConfig& cfg, ArtifactSink& sink, std::ostream& log) {
  scene::CanonicalObject obj = scene::make_canonical(cfg.attack.target_class);
  std::vector<Tensor> frames;
  if (!cfg.paths.delta.empty()) {
    Tensor delta = read_delta(cfg.paths.delta);
    Tensor mask = mask_for_tag(cfg.attack_mask, obj);
    frames = scene::render_sweep(obj, &mask, &delta, cfg.sweep, cfg.seed);
  } else {
    frames = scene::render_sweep(obj, nullptr, nullptr, cfg.sweep, cfg.seed);
  }
  char name[64];
  for (std::size_t i = 0; i < frames.size(); ++i) {
    std::snprintf(name, sizeof name, "frame_%04zu.ppm", i);
    write_ppm(frames[i], sink.path(name).string());
  }
  log << "render: wrote " << frames.size() << " frames\n";
}

}  // namespace commands

// Dispatches one CLI command. Artifacts land in cfg.out with a manifest;
// the effective configuration is echoed to the log and saved alongside.
inline void run(const std::string& command, const RunConfig& cfg, std::ostream& log) {
  ArtifactSink sink(cfg.out, command, cfg);
  {
    std::ofstream echo(sink.path("config.json"), std::ios::binary);
    std::string dumped = config_to_json(cfg).dump(2);
    echo << dumped << '\n';
    log << "config: " << dumped << "\n";
  }
  if (command == "gen-data")
    commands::gen_data(cfg, sink, log);
  else if (command == "train")
    commands::train(cfg, sink, log);
  else if (command == "attack-disappear")
    commands::attack_disappear(cfg, sink, log);
  else if (command == "attack-create")
    commands::attack_create(cfg, sink, log);
  else if (command == "eval")
    commands::eval(cfg, sink, log);
  else if (command == "transfer")
    commands::transfer(cfg, sink, log);
  else if (command == "render")
    commands::render(cfg, sink, log);
  else
    throw std::runtime_error("unknown command '" + command + "'");
  sink.finish();
}

}  // namespace signforge::cli

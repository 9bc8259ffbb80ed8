#pragma once

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "signforge/attack.hpp"
#include "signforge/detector.hpp"
#include "signforge/parallel.hpp"
#include "signforge/scene.hpp"

namespace signforge::evalharness {

struct FrameRecord {
  std::size_t frame = 0;
  std::vector<det::Detection> detections;
  bool target_detected = false;
};

// Per-sweep outcome in the missed/total bookkeeping of the attack
// tables. For disappearance runs success means the target went missing;
// for creation runs it means a spurious target appeared.
struct EvalReport {
  std::size_t total_frames = 0;
  std::size_t frames_without_target = 0;
  std::size_t success_count = 0;
  double success_ratio = 0.0;
  std::vector<FrameRecord> frames;
  std::string environment_tag;  // indoor-analog | outdoor-analog
  std::string detector_tag;
  std::string mode;  // disappearance | creation
};

struct TransferReport {
  std::string source_tag;  // detector the perturbation was optimized against
  std::string target_tag;
  EvalReport source_report;
  EvalReport target_report;
};

inline std::vector<FrameRecord> run_frames(const det::DetectorModel& model,
                                           const std::vector<Tensor>& frames,
                                           int target_class) {
  std::vector<FrameRecord> records(frames.size());
  parallel_for(frames.size(), [&](std::size_t i) {
    FrameRecord r;
    r.frame = i;
    r.detections = det::detect(model, frames[i]);
    for (const auto& d : r.detections)
      if (d.class_id == target_class) r.target_detected = true;
    records[i] = std::move(r);
  });
  return records;
}

// A frame succeeds iff the detector emits no target-class detection.
inline EvalReport eval_disappearance(const det::DetectorModel& model,
                                     const std::vector<Tensor>& frames,
                                     int target_class,
                                     std::string environment_tag = "indoor-analog",
                                     std::string detector_tag = "A") {
  if (frames.empty()) throw std::invalid_argument("eval_disappearance: no frames");
  EvalReport rep;
  rep.mode = "disappearance";
  rep.environment_tag = std::move(environment_tag);
  rep.detector_tag = std::move(detector_tag);
  rep.frames = run_frames(model, frames, target_class);
  rep.total_frames = rep.frames.size();
  for (const auto& f : rep.frames)
    if (!f.target_detected) ++rep.frames_without_target;
  rep.success_count = rep.frames_without_target;
  rep.success_ratio = static_cast<double>(rep.success_count) /
                      static_cast<double>(rep.total_frames);
  return rep;
}

// A frame succeeds iff at least one target-class detection appears
// (frames must contain no real target object).
inline EvalReport eval_creation(const det::DetectorModel& model,
                                const std::vector<Tensor>& frames, int target_class,
                                std::string environment_tag = "indoor-analog",
                                std::string detector_tag = "A") {
  if (frames.empty()) throw std::invalid_argument("eval_creation: no frames");
  EvalReport rep;
  rep.mode = "creation";
  rep.environment_tag = std::move(environment_tag);
  rep.detector_tag = std::move(detector_tag);
  rep.frames = run_frames(model, frames, target_class);
  rep.total_frames = rep.frames.size();
  for (const auto& f : rep.frames)
    if (!f.target_detected) ++rep.frames_without_target;
  rep.success_count = rep.total_frames - rep.frames_without_target;
  rep.success_ratio = static_cast<double>(rep.success_count) /
                      static_cast<double>(rep.total_frames);
  return rep;
}

// Renders one perturbed sweep and evaluates it with both detectors.
inline TransferReport eval_transfer(const scene::CanonicalObject& obj,
                                    const attack::PerturbationSpec& pert,
                                    const det::DetectorModel& model_a,
                                    const std::string& tag_a,
                                    const det::DetectorModel& model_b,
                                    const std::string& tag_b,
                                    const scene::SweepConfig& sweep,
                                    std::uint64_t seed, int target_class,
                                    const std::string& environment_tag = "indoor-analog") {
  if (tag_a == tag_b)
    throw std::invalid_argument("eval_transfer: detectors must be distinct (tag '" +
                                tag_a + "')");
  std::vector<Tensor> frames =
      scene::render_sweep(obj, &pert.mask, &pert.delta, sweep, seed);
  TransferReport rep;
  rep.source_tag = tag_a;
  rep.target_tag = tag_b;
  rep.source_report = eval_disappearance(model_a, frames, target_class, environment_tag, tag_a);
  rep.target_report = eval_disappearance(model_b, frames, target_class, environment_tag, tag_b);
  return rep;
}

// "202/236 (85.6%)" — the missed/total table format.
inline std::string summary_line(const EvalReport& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%zu/%zu (%.1f%%)", r.success_count, r.total_frames,
                100.0 * r.success_ratio);
  return buf;
}

enum class ReportFormat { kCsv, kJson };

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["total_frames"] = r.total_frames;
  j["frames_without_target"] = r.frames_without_target;
  j["success_count"] = r.success_count;
  char ratio[16];
  std::snprintf(ratio, sizeof ratio, "%.4f", r.success_ratio);
  j["success_ratio"] = ratio;
  j["environment_tag"] = r.environment_tag;
  j["detector_tag"] = r.detector_tag;
  j["mode"] = r.mode;
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : r.frames) {
    nlohmann::json jf;
    jf["frame"] = f.frame;
    jf["target_detected"] = f.target_detected;
    nlohmann::json dets = nlohmann::json::array();
    for (const auto& d : f.detections) {
      dets.push_back({{"class_id", d.class_id},
                      {"score", d.score},
                      {"cx", d.box.cx},
                      {"cy", d.box.cy},
                      {"w", d.box.w},
                      {"h", d.box.h},
                      {"row", d.row},
                      {"col", d.col},
                      {"box_index", d.box_index}});
    }
    jf["detections"] = std::move(dets);
    frames.push_back(std::move(jf));
  }
  j["frames"] = std::move(frames);
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.total_frames = j.at("total_frames").get<std::size_t>();
  r.frames_without_target = j.at("frames_without_target").get<std::size_t>();
  r.success_count = j.at("success_count").get<std::size_t>();
  r.environment_tag = j.at("environment_tag").get<std::string>();
  r.detector_tag = j.at("detector_tag").get<std::string>();
  r.mode = j.at("mode").get<std::string>();
  for (const auto& jf : j.at("frames")) {
    FrameRecord f;
    f.frame = jf.at("frame").get<std::size_t>();
    f.target_detected = jf.at("target_detected").get<bool>();
    for (const auto& jd : jf.at("detections")) {
      det::Detection d;
      d.class_id = jd.at("class_id").get<int>();
      d.score = jd.at("score").get<double>();
      d.box = Box{jd.at("cx").get<double>(), jd.at("cy").get<double>(),
                  jd.at("w").get<double>(), jd.at("h").get<double>()};
      d.row = jd.at("row").get<std::size_t>();
      d.col = jd.at("col").get<std::size_t>();
      d.box_index = jd.at("box_index").get<std::size_t>();
      f.detections.push_back(d);
    }
    r.frames.push_back(std::move(f));
  }
  // The ratio is the exact integer quotient, not the 4-decimal rendering.
  r.success_ratio = r.total_frames
                        ? static_cast<double>(r.success_count) /
                              static_cast<double>(r.total_frames)
                        : 0.0;
  return r;
}

inline void write_report(const EvalReport& r, const std::string& path,
                         ReportFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_report: cannot open " + path);
  if (format == ReportFormat::kCsv) {
    out << "frame,detections,target_detected\n";
    for (const auto& f : r.frames)
      out << f.frame << ',' << f.detections.size() << ',' << (f.target_detected ? 1 : 0)
          << '\n';
  } else {
    out << report_to_json(r).dump(2) << '\n';
  }
  if (!out.good()) throw std::runtime_error("write_report: write failed for " + path);
}

}  // namespace signforge::evalharness

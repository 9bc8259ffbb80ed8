#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "signforge/detector.hpp"
#include "signforge/parallel.hpp"
#include "signforge/rng.hpp"
#include "signforge/scene.hpp"

namespace signforge::attack {

// Canonical-frame perturbation: a binary stencil restricting where paint
// may go, and the paint itself. The applied perturbation is always
// mask * delta; pixels outside the mask never change a scene.
struct PerturbationSpec {
  Tensor mask;   // HxW, values in {0,1}
  Tensor delta;  // HxWx3, values in [-1,1]
  std::string shape_tag;  // octagon-poster | two-bar-sticker | patch

  void validate() const {
    if (mask.rank() != 2 || delta.rank() != 3 || delta.dim(2) != 3 ||
        mask.dim(0) != delta.dim(0) || mask.dim(1) != delta.dim(1))
      throw std::invalid_argument("PerturbationSpec: mask HxW and delta HxWx3 required");
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i] != 0.0 && mask[i] != 1.0)
        throw std::invalid_argument("PerturbationSpec: mask must be binary");
    for (std::size_t i = 0; i < delta.size(); ++i)
      if (delta[i] < -1.0 || delta[i] > 1.0)
        throw std::invalid_argument("PerturbationSpec: delta outside [-1,1]");
  }
};

inline PerturbationSpec zero_perturbation(Tensor mask, std::string tag) {
  PerturbationSpec p;
  p.delta = Tensor({mask.dim(0), mask.dim(1), 3});
  p.mask = std::move(mask);
  p.shape_tag = std::move(tag);
  return p;
}

// Whole-surface stencil: every object pixel is paintable.
inline Tensor poster_mask(const scene::CanonicalObject& obj) { return obj.alpha; }

// Two horizontal bars across the object, the sticker layout.
inline Tensor two_bar_mask(const scene::CanonicalObject& obj) {
  std::size_t h = obj.alpha.dim(0), w = obj.alpha.dim(1);
  Tensor m({h, w});
  auto band = [&](double lo, double hi, std::size_t y) {
    double v = static_cast<double>(y) / static_cast<double>(h - 1);
    return v >= lo && v <= hi;
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (obj.alpha(y, x) == 1.0 && (band(0.16, 0.34, y) || band(0.66, 0.84, y)))
        m(y, x) = 1.0;
  return m;
}

// Colors a printer can reproduce. Default: the 3x3x3 RGB lattice.
struct PrintableSet {
  std::vector<std::array<double, 3>> colors;

  static PrintableSet rgb_lattice() {
    PrintableSet s;
    for (double r : {0.0, 0.5, 1.0})
      for (double g : {0.0, 0.5, 1.0})
        for (double b : {0.0, 0.5, 1.0}) s.colors.push_back({r, g, b});
    return s;
  }

  void validate() const {
    if (colors.empty()) throw std::invalid_argument("PrintableSet: empty");
    for (const auto& c : colors)
      for (double v : c)
        if (v < 0.0 || v > 1.0)
          throw std::invalid_argument("PrintableSet: component outside [0,1]");
  }
};

struct AttackConfig {
  double tv_weight = 1e-4;   // lambda
  double nps_weight = 0.0;
  double tau = 0.2;          // creation box-confidence threshold
  int target_class = scene::kStopOctagon;
  int epochs = 500;
  std::size_t batch = 8;     // transform samples per step
  double lr = 0.05;
  std::uint64_t seed = 1;
  scene::SceneDistribution dist;  // pose sampling for attack scenes
  PrintableSet printable = PrintableSet::rgb_lattice();
  det::ScoreMode score_mode = det::ScoreMode::kProduct;
  bool smooth_max = false;        // log-sum-exp relaxation of the max
  double smooth_max_sharpness = 40.0;

  void validate() const {
    if (tv_weight < 0) throw std::invalid_argument("AttackConfig: tv_weight >= 0");
    if (!(tau > 0 && tau < 1)) throw std::invalid_argument("AttackConfig: tau in (0,1)");
    if (batch < 1) throw std::invalid_argument("AttackConfig: batch >= 1");
    if (epochs < 0) throw std::invalid_argument("AttackConfig: epochs >= 0");
    printable.validate();
    dist.validate();
  }
};

// Total variation of the masked perturbation: forward differences down
// and right, border terms omitted, per-channel sums added. |.| takes
// subgradient 0 at kinks.
inline ad::Var tv_norm(ad::Graph& g, const Tensor& mask, ad::Var delta) {
  const Tensor& d = g.value(delta);
  if (mask.rank() != 2 || d.rank() != 3 || mask.dim(0) != d.dim(0) ||
      mask.dim(1) != d.dim(1))
    throw std::invalid_argument("tv_norm: mask HxW and delta HxWxC required");
  std::size_t h = d.dim(0), w = d.dim(1), c = d.dim(2);
  auto applied = [&](const Tensor& dd, std::size_t y, std::size_t x, std::size_t ch) {
    return mask(y, x) * dd(y, x, ch);
  };
  double total = 0.0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double a = applied(d, y, x, ch);
        if (y + 1 < h) total += std::abs(applied(d, y + 1, x, ch) - a);
        if (x + 1 < w) total += std::abs(applied(d, y, x + 1, ch) - a);
      }
  auto m = std::make_shared<Tensor>(mask);
  return g.make_node(Tensor::scalar(total), {delta}, [delta, m, h, w, c](ad::Graph& gg, ad::Var self) {
    double go = gg.grad_ref(self)[0];
    const Tensor& dd = gg.value(delta);
    Tensor& gd = gg.grad_ref(delta);
    auto applied = [&](std::size_t y, std::size_t x, std::size_t ch) {
      return (*m)(y, x) * dd(y, x, ch);
    };
    auto bump = [&](std::size_t y, std::size_t x, std::size_t ch, double v) {
      gd((y * w + x) * c + ch) += v * (*m)(y, x);
    };
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double a = applied(y, x, ch);
          if (y + 1 < h) {
            double diff = applied(y + 1, x, ch) - a;
            double s = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
            bump(y + 1, x, ch, go * s);
            bump(y, x, ch, -go * s);
          }
          if (x + 1 < w) {
            double diff = applied(y, x + 1, ch) - a;
            double s = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
            bump(y, x + 1, ch, go * s);
            bump(y, x, ch, -go * s);
          }
        }
  });
}

// Non-printability score: for each masked pixel, the product of Euclidean
// distances from the applied perturbation color to every printable
// color. Zero (with zero subgradient) at exact matches.
inline ad::Var nps(ad::Graph& g, const Tensor& mask, ad::Var delta,
                   const PrintableSet& printable) {
  printable.validate();
  const Tensor& d = g.value(delta);
  if (mask.rank() != 2 || d.rank() != 3 || d.dim(2) != 3 ||
      mask.dim(0) != d.dim(0) || mask.dim(1) != d.dim(1))
    throw std::invalid_argument("nps: mask HxW and delta HxWx3 required");
  std::size_t npix = mask.size();
  double total = 0.0;
  for (std::size_t p = 0; p < npix; ++p) {
    if (mask[p] != 1.0) continue;
    double prod = 1.0;
    for (const auto& col : printable.colors) {
      double dx = d[p * 3] - col[0], dy = d[p * 3 + 1] - col[1], dz = d[p * 3 + 2] - col[2];
      prod *= std::sqrt(dx * dx + dy * dy + dz * dz);
    }
    total += prod;
  }
  auto m = std::make_shared<Tensor>(mask);
  auto cols = std::make_shared<std::vector<std::array<double, 3>>>(printable.colors);
  return g.make_node(Tensor::scalar(total), {delta}, [delta, m, cols](ad::Graph& gg, ad::Var self) {
    double go = gg.grad_ref(self)[0];
    const Tensor& dd = gg.value(delta);
    Tensor& gd = gg.grad_ref(delta);
    for (std::size_t p = 0; p < m->size(); ++p) {
      if ((*m)[p] != 1.0) continue;
      std::size_t n = cols->size();
      std::vector<double> dist(n);
      std::vector<std::array<double, 3>> diff(n);
      bool zero = false;
      double prod = 1.0;
      for (std::size_t j = 0; j < n; ++j) {
        const auto& col = (*cols)[j];
        diff[j] = {dd[p * 3] - col[0], dd[p * 3 + 1] - col[1], dd[p * 3 + 2] - col[2]};
        dist[j] = std::sqrt(diff[j][0] * diff[j][0] + diff[j][1] * diff[j][1] +
                            diff[j][2] * diff[j][2]);
        if (dist[j] == 0.0) zero = true;
        prod *= dist[j];
      }
      if (zero) continue;  // exact printable match: subgradient 0
      for (std::size_t j = 0; j < n; ++j) {
        double f = go * prod / (dist[j] * dist[j]);
        gd[p * 3] += f * diff[j][0];
        gd[p * 3 + 1] += f * diff[j][1];
        gd[p * 3 + 2] += f * diff[j][2];
      }
    }
  });
}

// Disappearance loss: the maximum target-class score over every cell and
// box. The exact max routes its subgradient to the first maximizer; the
// optional smoothed variant uses log-sum-exp.
inline ad::Var loss_disappearance(ad::Graph& g, ad::Var decoded,
                                  const det::DetectorConfig& cfg, int target_class,
                                  det::ScoreMode mode = det::ScoreMode::kProduct,
                                  bool smooth = false, double sharpness = 40.0) {
  ad::Var scores = det::box_scores(g, decoded, cfg, static_cast<std::size_t>(target_class), mode);
  if (!smooth) return g.reduce_max(scores).value;
  // log-sum-exp relaxation: max + log(sum exp(k*(x - max)))/k
  const Tensor& s = g.value(scores);
  double mx = s[0];
  for (std::size_t i = 1; i < s.size(); ++i) mx = std::max(mx, s[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) sum += std::exp(sharpness * (s[i] - mx));
  double val = mx + std::log(sum) / sharpness;
  return g.make_node(Tensor::scalar(val), {scores},
                     [scores, mx, sharpness](ad::Graph& gg, ad::Var self) {
                       double go = gg.grad_ref(self)[0];
                       const Tensor& s2 = gg.value(scores);
                       Tensor& gs = gg.grad_ref(scores);
                       double sum2 = 0.0;
                       for (std::size_t i = 0; i < s2.size(); ++i)
                         sum2 += std::exp(sharpness * (s2[i] - mx));
                       for (std::size_t i = 0; i < s2.size(); ++i)
                         gs[i] += go * std::exp(sharpness * (s2[i] - mx)) / sum2;
                     });
}

// Creation loss over the candidate boxes covering the patch: raise box
// confidence until it clears tau, then raise the conditional probability
// of the target class. Returns the negated active quantity so that
// minimizing the loss performs the two-phase climb.
inline ad::Var loss_creation(ad::Graph& g, ad::Var decoded, const det::DetectorConfig& cfg,
                             const std::vector<std::pair<std::size_t, std::size_t>>& cells,
                             int target_class, double tau) {
  if (cells.empty()) throw std::invalid_argument("loss_creation: empty candidate set");
  const Tensor& d = g.value(decoded);
  std::size_t BC = cfg.box_channels(), B = cfg.boxes;
  std::size_t best_base = 0;
  double best_conf = -1.0;
  for (const auto& [row, col] : cells) {
    det::check_index(cfg, row, col, 0);
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t base = (row * cfg.grid + col) * cfg.out_channels() + b * BC;
      if (d[base] > best_conf) {
        best_conf = d[base];
        best_base = base;
      }
    }
  }
  std::size_t cls_slot = best_base + 5 + static_cast<std::size_t>(target_class);
  bool localization = best_conf <= tau;
  double val = localization ? -best_conf : -d[cls_slot];
  return g.make_node(Tensor::scalar(val), {decoded},
                     [decoded, best_base, cls_slot, localization](ad::Graph& gg, ad::Var self) {
                       double go = gg.grad_ref(self)[0];
                       Tensor& gd = gg.grad_ref(decoded);
                       if (localization)
                         gd[best_base] -= go;
                       else
                         gd[cls_slot] -= go;
                     });
}

// One pose of the attack batch.
struct ScenePose {
  const Tensor* background = nullptr;
  scene::TransformSample t;
  double gain = 1.0;
};

// Pose sampling rule shared by the optimizer and its tests: scene i of
// epoch e draws from stream (seed, e * batch + i), in the order
// background index, transform, gain.
inline ScenePose sample_pose(const AttackConfig& cfg, const std::vector<Tensor>& bgs,
                             int epoch, std::size_t i) {
  Pcg32 rng(cfg.seed, static_cast<std::uint64_t>(epoch) * cfg.batch + i);
  ScenePose p;
  p.background = &bgs[rng.next_below(static_cast<std::uint32_t>(bgs.size()))];
  p.t = scene::sample_transform(cfg.dist, rng);
  p.gain = scene::sample(cfg.dist.gain, rng);
  return p;
}

// The full modified objective on one graph:
//   lambda * TV(M.delta) + w_nps * NPS(M.delta) + mean_i J_d(scene_i).
inline ad::Var objective(ad::Graph& g, ad::Var delta, const scene::CanonicalObject& obj,
                         const Tensor& mask, const det::DetectorModel& model,
                         const std::vector<ScenePose>& batch, const AttackConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("objective: empty batch");
  det::ModelVars mv = det::lift(g, model, false);
  ad::Var acc;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ad::Var sc = scene::perturbed_scene(g, *batch[i].background, obj, delta, mask,
                                        batch[i].t, batch[i].gain);
    ad::Var raw = det::forward(g, model, mv, sc);
    ad::Var dec = det::decode(g, raw, model.config);
    ad::Var j = loss_disappearance(g, dec, model.config, cfg.target_class,
                                   cfg.score_mode, cfg.smooth_max,
                                   cfg.smooth_max_sharpness);
    acc = i == 0 ? j : g.add(acc, j);
  }
  ad::Var mean_j = g.scale(acc, 1.0 / static_cast<double>(batch.size()));
  ad::Var total = g.add(mean_j, g.scale(tv_norm(g, mask, delta), cfg.tv_weight));
  if (cfg.nps_weight != 0.0)
    total = g.add(total, g.scale(nps(g, mask, delta, cfg.printable), cfg.nps_weight));
  return total;
}

struct TraceRow {
  int epoch = 0;
  double j_term = 0, tv_term = 0, nps_term = 0, total = 0;
};

struct AttackResult {
  PerturbationSpec perturbation;
  std::vector<TraceRow> trace;
};

class AttackDiverged : public std::runtime_error {
 public:
  AttackDiverged(const std::string& what, std::vector<TraceRow> trace)
      : std::runtime_error(what), trace(std::move(trace)) {}
  std::vector<TraceRow> trace;
};

using AttackObserver =
    std::function<void(int epoch, const PerturbationSpec&, const TraceRow&)>;

namespace detail {

// Clamp delta into [-1,1], keep object + delta inside [0,1], and zero it
// outside the mask.
inline void project(PerturbationSpec& p, const Tensor& object_image) {
  for (std::size_t i = 0; i < p.delta.size(); ++i) {
    double v = std::min(1.0, std::max(-1.0, p.delta[i]));
    double o = object_image[i];
    v = std::min(1.0 - o, std::max(-o, v));
    p.delta[i] = v * p.mask[i / 3];
  }
}

struct SceneEval {
  double loss = 0;
  Tensor grad;
};

}  // namespace detail

// Minimizes the disappearance objective by projected SGD over sampled
// poses. Scene losses in a batch may be evaluated in parallel; gradients
// are reduced in batch order, so results do not depend on worker count.
inline AttackResult optimize_disappearance(const scene::CanonicalObject& obj,
                                           PerturbationSpec init, const AttackConfig& cfg,
                                           const det::DetectorModel& model,
                                           const AttackObserver& observer = nullptr) {
  cfg.validate();
  init.validate();
  for (std::size_t p = 0; p < init.mask.size(); ++p)
    if (init.mask[p] == 1.0 && obj.alpha[p] != 1.0)
      throw std::invalid_argument("optimize_disappearance: mask not inside object alpha");
  std::vector<Tensor> bgs = scene::make_background_set(
      cfg.dist.background_count, model.config.input_size, cfg.dist.background_seed);
  AttackResult res;
  res.perturbation = std::move(init);
  detail::project(res.perturbation, obj.image);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<detail::SceneEval> evals(cfg.batch);
    parallel_for(cfg.batch, [&](std::size_t i) {
      ScenePose pose = sample_pose(cfg, bgs, epoch, i);
      ad::Graph g;
      ad::Var delta = g.leaf(res.perturbation.delta, true);
      ad::Var sc = scene::perturbed_scene(g, *pose.background, obj, delta,
                                          res.perturbation.mask, pose.t, pose.gain);
      det::ModelVars mv = det::lift(g, model, false);
      ad::Var raw = det::forward(g, model, mv, sc);
      ad::Var dec = det::decode(g, raw, model.config);
      ad::Var j = loss_disappearance(g, dec, model.config, cfg.target_class,
                                     cfg.score_mode, cfg.smooth_max,
                                     cfg.smooth_max_sharpness);
      g.backward(j);
      evals[i] = {g.value(j)[0], g.grad(delta)};
    });
    double jsum = 0.0;
    Tensor grad = Tensor::zeros(res.perturbation.delta.shape());
    for (const auto& e : evals) {
      jsum += e.loss;
      for (std::size_t x = 0; x < grad.size(); ++x) grad[x] += e.grad[x];
    }
    double inv_b = 1.0 / static_cast<double>(cfg.batch);
    for (std::size_t x = 0; x < grad.size(); ++x) grad[x] *= inv_b;

    ad::Graph rg;
    ad::Var dv = rg.leaf(res.perturbation.delta, true);
    ad::Var tv = tv_norm(rg, res.perturbation.mask, dv);
    ad::Var reg = rg.scale(tv, cfg.tv_weight);
    double nps_val = 0.0;
    if (cfg.nps_weight != 0.0) {
      ad::Var np = nps(rg, res.perturbation.mask, dv, cfg.printable);
      nps_val = rg.value(np)[0];
      reg = rg.add(reg, rg.scale(np, cfg.nps_weight));
    }
    rg.backward(reg);
    const Tensor& rgrad = rg.grad(dv);
    for (std::size_t x = 0; x < grad.size(); ++x) grad[x] += rgrad[x];

    TraceRow row;
    row.epoch = epoch;
    row.j_term = jsum * inv_b;
    row.tv_term = cfg.tv_weight * rg.value(tv)[0];
    row.nps_term = cfg.nps_weight * nps_val;
    row.total = row.j_term + row.tv_term + row.nps_term;
    if (!std::isfinite(row.total))
      throw AttackDiverged("optimize_disappearance: non-finite loss at epoch " +
                               std::to_string(epoch),
                           std::move(res.trace));
    res.trace.push_back(row);

    for (std::size_t x = 0; x < grad.size(); ++x)
      res.perturbation.delta[x] -= cfg.lr * grad[x];
    detail::project(res.perturbation, obj.image);
    if (observer) observer(epoch, res.perturbation, row);
  }
  return res;
}

// Grid cells whose region intersects the patch footprint under the given
// pose.
inline std::vector<std::pair<std::size_t, std::size_t>> candidate_cells(
    const det::DetectorConfig& cfg, std::size_t patch_size,
    const scene::TransformSample& t) {
  Affine2 tf = scene::affine_for(t, patch_size, cfg.input_size);
  double p = static_cast<double>(patch_size - 1);
  double xs[4], ys[4];
  tf.apply(0, 0, xs[0], ys[0]);
  tf.apply(p, 0, xs[1], ys[1]);
  tf.apply(0, p, xs[2], ys[2]);
  tf.apply(p, p, xs[3], ys[3]);
  double x0 = xs[0], x1 = xs[0], y0 = ys[0], y1 = ys[0];
  for (int i = 1; i < 4; ++i) {
    x0 = std::min(x0, xs[i]);
    x1 = std::max(x1, xs[i]);
    y0 = std::min(y0, ys[i]);
    y1 = std::max(y1, ys[i]);
  }
  double side = static_cast<double>(cfg.input_size);
  double cell = side / static_cast<double>(cfg.grid);
  x0 = std::max(0.0, x0);
  y0 = std::max(0.0, y0);
  x1 = std::min(side - 1.0, x1);
  y1 = std::min(side - 1.0, y1);
  std::vector<std::pair<std::size_t, std::size_t>> cells;
  if (x0 > x1 || y0 > y1) return cells;
  auto c0 = static_cast<std::size_t>(x0 / cell), c1 = static_cast<std::size_t>(x1 / cell);
  auto r0 = static_cast<std::size_t>(y0 / cell), r1 = static_cast<std::size_t>(y1 / cell);
  for (std::size_t r = r0; r <= r1 && r < cfg.grid; ++r)
    for (std::size_t c = c0; c <= c1 && c < cfg.grid; ++c) cells.emplace_back(r, c);
  return cells;
}

// Optimizes a free-standing patch so the detector reports the target
// class where none exists. Same projected-SGD loop as the disappearance
// attack, with the patch placed at a fresh random pose per scene.
inline AttackResult optimize_creation(std::size_t patch_size, const AttackConfig& cfg,
                                      const det::DetectorModel& model,
                                      const AttackObserver& observer = nullptr) {
  cfg.validate();
  scene::CanonicalObject patch = scene::make_patch(patch_size);
  std::vector<Tensor> bgs = scene::make_background_set(
      cfg.dist.background_count, model.config.input_size, cfg.dist.background_seed);
  AttackResult res;
  res.perturbation = zero_perturbation(patch.alpha, "patch");
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<detail::SceneEval> evals(cfg.batch);
    parallel_for(cfg.batch, [&](std::size_t i) {
      ScenePose pose = sample_pose(cfg, bgs, epoch, i);
      auto cells = candidate_cells(model.config, patch_size, pose.t);
      if (cells.empty())
        throw std::invalid_argument("optimize_creation: patch outside frame; "
                                    "tighten the placement distribution");
      ad::Graph g;
      ad::Var delta = g.leaf(res.perturbation.delta, true);
      ad::Var sc = scene::perturbed_scene(g, *pose.background, patch, delta,
                                          res.perturbation.mask, pose.t, pose.gain);
      det::ModelVars mv = det::lift(g, model, false);
      ad::Var raw = det::forward(g, model, mv, sc);
      ad::Var dec = det::decode(g, raw, model.config);
      ad::Var j = loss_creation(g, dec, model.config, cells, cfg.target_class, cfg.tau);
      g.backward(j);
      evals[i] = {g.value(j)[0], g.grad(delta)};
    });
    double jsum = 0.0;
    Tensor grad = Tensor::zeros(res.perturbation.delta.shape());
    for (const auto& e : evals) {
      jsum += e.loss;
      for (std::size_t x = 0; x < grad.size(); ++x) grad[x] += e.grad[x];
    }
    double inv_b = 1.0 / static_cast<double>(cfg.batch);
    for (std::size_t x = 0; x < grad.size(); ++x) grad[x] *= inv_b;

    ad::Graph rg;
    ad::Var dv = rg.leaf(res.perturbation.delta, true);
    ad::Var tv = tv_norm(rg, res.perturbation.mask, dv);
    ad::Var reg = rg.scale(tv, cfg.tv_weight);
    double nps_val = 0.0;
    if (cfg.nps_weight != 0.0) {
      ad::Var np = nps(rg, res.perturbation.mask, dv, cfg.printable);
      nps_val = rg.value(np)[0];
      reg = rg.add(reg, rg.scale(np, cfg.nps_weight));
    }
    rg.backward(reg);
    const Tensor& rgrad = rg.grad(dv);
    for (std::size_t x = 0; x < grad.size(); ++x) grad[x] += rgrad[x];

    TraceRow row;
    row.epoch = epoch;
    row.j_term = jsum * inv_b;
    row.tv_term = cfg.tv_weight * rg.value(tv)[0];
    row.nps_term = cfg.nps_weight * nps_val;
    row.total = row.j_term + row.tv_term + row.nps_term;
    if (!std::isfinite(row.total))
      throw AttackDiverged("optimize_creation: non-finite loss at epoch " +
                               std::to_string(epoch),
                           std::move(res.trace));
    res.trace.push_back(row);

    for (std::size_t x = 0; x < grad.size(); ++x)
      res.perturbation.delta[x] -= cfg.lr * grad[x];
    detail::project(res.perturbation, patch.image);
    if (observer) observer(epoch, res.perturbation, row);
  }
  return res;
}

}  // namespace signforge::attack

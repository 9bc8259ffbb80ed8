#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "signforge/autodiff.hpp"
#include "signforge/geometry.hpp"
#include "signforge/rng.hpp"
#include "signforge/tensor.hpp"

namespace signforge::det {

// Backbone variants. Both are four blocks of [3x3 conv, leaky-ReLU(0.1),
// 2x2 max-pool] followed by a 1x1 head; kTiny4B32 narrows the third block
// to 32 channels.
enum class Arch : std::uint32_t { kTiny4 = 0, kTiny4B32 = 1 };

inline std::array<std::size_t, 4> arch_channels(Arch a) {
  return a == Arch::kTiny4 ? std::array<std::size_t, 4>{16, 32, 64, 64}
                           : std::array<std::size_t, 4>{16, 32, 32, 64};
}

inline std::string arch_name(Arch a) {
  return a == Arch::kTiny4 ? "tiny4" : "tiny4-b32";
}

// Grid-detector output contract: S x S cells, B boxes per cell, each box
// carrying (objectness, x, y, w, h) plus C class scores. Raw and decoded
// tensors share the channel layout
//   b*(5+C) + {0: objectness, 1: tx, 2: ty, 3: tw, 4: th, 5+j: class j}.
struct DetectorConfig {
  std::size_t grid = 7;         // S
  std::size_t boxes = 2;        // B
  std::size_t classes = 4;      // C
  std::size_t input_size = 112; // pixels per side
  std::vector<std::array<double, 2>> anchors = {{1.0, 1.0}, {2.5, 2.5}};  // cell units
  double score_threshold = 0.1;
  double nms_iou_threshold = 0.45;

  std::size_t box_channels() const { return 5 + classes; }
  std::size_t out_channels() const { return boxes * box_channels(); }

  void validate() const {
    if (grid == 0 || boxes == 0 || classes == 0)
      throw std::invalid_argument("DetectorConfig: S, B, C must be positive");
    if (input_size == 0 || input_size % grid != 0)
      throw std::invalid_argument("DetectorConfig: input_size must be divisible by S");
    if (anchors.size() != boxes)
      throw std::invalid_argument("DetectorConfig: need one anchor pair per box");
    for (const auto& a : anchors)
      if (!(a[0] > 0) || !(a[1] > 0))
        throw std::invalid_argument("DetectorConfig: anchors must be positive");
    if (!(score_threshold > 0 && score_threshold < 1))
      throw std::invalid_argument("DetectorConfig: score_threshold must be in (0,1)");
    if (!(nms_iou_threshold > 0 && nms_iou_threshold < 1))
      throw std::invalid_argument("DetectorConfig: nms_iou_threshold must be in (0,1)");
  }
};

struct DetectorModel {
  DetectorConfig config;
  Arch arch = Arch::kTiny4;
  std::vector<Tensor> kernels;  // conv weights in declaration order
  std::vector<Tensor> biases;   // matching biases

  std::size_t weight_scalars() const {
    std::size_t n = 0;
    for (const auto& t : kernels) n += t.size();
    for (const auto& t : biases) n += t.size();
    return n;
  }
};

// The four-block backbone downsamples by 16, so the head sees an
// S x S map exactly when input_size == 16 * S.
inline void validate_arch(const DetectorConfig& cfg) {
  cfg.validate();
  if (cfg.input_size != 16 * cfg.grid)
    throw std::invalid_argument("DetectorModel: input_size must equal 16*S for this backbone");
}

inline DetectorModel random_init(const DetectorConfig& cfg, Arch arch,
                                 std::uint64_t seed) {
  validate_arch(cfg);
  DetectorModel m;
  m.config = cfg;
  m.arch = arch;
  Pcg32 rng(seed, 0);
  auto chans = arch_channels(arch);
  std::size_t cin = 3;
  auto make_conv = [&](std::size_t k, std::size_t cout, double gain) {
    Tensor w({k, k, cin, cout});
    double r = gain * std::sqrt(6.0 / static_cast<double>(k * k * cin));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-r, r);
    m.kernels.push_back(std::move(w));
    m.biases.push_back(Tensor({cout}));
    cin = cout;
  };
  for (std::size_t c : chans) make_conv(3, c, 1.0);
  // Damped head init keeps the exp-decoded box sizes near their anchors
  // at the start of training.
  make_conv(1, cfg.out_channels(), 0.1);
  // Start objectness logits low so empty cells settle quickly.
  Tensor& hb = m.biases.back();
  for (std::size_t b = 0; b < cfg.boxes; ++b) hb[b * cfg.box_channels()] = -2.0;
  return m;
}

// Model weights lifted onto a graph, trainable or frozen.
struct ModelVars {
  std::vector<ad::Var> kernels, biases;
};

inline ModelVars lift(ad::Graph& g, const DetectorModel& m, bool trainable) {
  ModelVars v;
  for (const auto& k : m.kernels) v.kernels.push_back(g.leaf(k, trainable));
  for (const auto& b : m.biases) v.biases.push_back(g.leaf(b, trainable));
  return v;
}

inline ad::Var forward(ad::Graph& g, const DetectorModel& m, const ModelVars& mv,
                       ad::Var image) {
  const Tensor& im = g.value(image);
  if (im.rank() != 3 || im.dim(0) != m.config.input_size ||
      im.dim(1) != m.config.input_size || im.dim(2) != 3)
    throw std::invalid_argument(
        "forward: image must be " + std::to_string(m.config.input_size) + "x" +
        std::to_string(m.config.input_size) + "x3, got " + shape_string(im.shape()));
  ad::Var x = image;
  for (std::size_t i = 0; i + 1 < mv.kernels.size(); ++i) {
    x = g.conv2d(x, mv.kernels[i], 1, 1);
    x = g.bias_add(x, mv.biases[i]);
    x = g.leaky_relu(x, 0.1);
    x = g.max_pool2(x);
  }
  x = g.conv2d(x, mv.kernels.back(), 1, 0);
  x = g.bias_add(x, mv.biases.back());
  return x;
}

inline Tensor forward(const DetectorModel& m, const Tensor& image) {
  ad::Graph g;
  ModelVars mv = lift(g, m, false);
  return g.value(forward(g, m, mv, g.constant(image)));
}

// Decodes raw logits in place of each slot: objectness and the x/y
// offsets through sigmoid, w/h through anchor * exp, classes through a
// per-box softmax. Box geometry lands in normalized image coordinates.
inline ad::Var decode(ad::Graph& g, ad::Var raw, const DetectorConfig& cfg) {
  const Tensor& v = g.value(raw);
  if (v.rank() != 3 || v.dim(0) != cfg.grid || v.dim(1) != cfg.grid ||
      v.dim(2) != cfg.out_channels())
    throw std::invalid_argument("decode: raw tensor has shape " +
                                shape_string(v.shape()) + ", expected SxSx(B*(5+C))");
  std::size_t S = cfg.grid, B = cfg.boxes, C = cfg.classes, BC = cfg.box_channels();
  double Sd = static_cast<double>(S);
  Tensor out = v;
  for (std::size_t r = 0; r < S; ++r)
    for (std::size_t c = 0; c < S; ++c)
      for (std::size_t b = 0; b < B; ++b) {
        double* p = &out(r, c, b * BC);
        p[0] = 1.0 / (1.0 + std::exp(-p[0]));
        p[1] = (1.0 / (1.0 + std::exp(-p[1])) + static_cast<double>(c)) / Sd;
        p[2] = (1.0 / (1.0 + std::exp(-p[2])) + static_cast<double>(r)) / Sd;
        p[3] = cfg.anchors[b][0] * std::exp(p[3]) / Sd;
        p[4] = cfg.anchors[b][1] * std::exp(p[4]) / Sd;
        double mx = p[5];
        for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, p[5 + j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < C; ++j) {
          p[5 + j] = std::exp(p[5 + j] - mx);
          sum += p[5 + j];
        }
        for (std::size_t j = 0; j < C; ++j) p[5 + j] /= sum;
      }
  return g.make_node(std::move(out), {raw}, [raw, cfg](ad::Graph& gg, ad::Var self) {
    const Tensor& go = gg.grad_ref(self);
    const Tensor& dv = gg.value(self);
    Tensor& gr = gg.grad_ref(raw);
    std::size_t S = cfg.grid, B = cfg.boxes, C = cfg.classes, BC = cfg.box_channels();
    double Sd = static_cast<double>(S);
    for (std::size_t r = 0; r < S; ++r)
      for (std::size_t c = 0; c < S; ++c)
        for (std::size_t b = 0; b < B; ++b) {
          std::size_t base = (r * S + c) * B * BC + b * BC;
          double obj = dv[base + 0];
          gr[base + 0] += go[base + 0] * obj * (1.0 - obj);
          double sx = dv[base + 1] * Sd - static_cast<double>(c);
          gr[base + 1] += go[base + 1] * sx * (1.0 - sx) / Sd;
          double sy = dv[base + 2] * Sd - static_cast<double>(r);
          gr[base + 2] += go[base + 2] * sy * (1.0 - sy) / Sd;
          gr[base + 3] += go[base + 3] * dv[base + 3];
          gr[base + 4] += go[base + 4] * dv[base + 4];
          double dot = 0.0;
          for (std::size_t j = 0; j < C; ++j) dot += go[base + 5 + j] * dv[base + 5 + j];
          for (std::size_t j = 0; j < C; ++j)
            gr[base + 5 + j] += dv[base + 5 + j] * (go[base + 5 + j] - dot);
        }
  });
}

inline Tensor decode(const DetectorConfig& cfg, const Tensor& raw) {
  ad::Graph g;
  return g.value(decode(g, g.constant(raw), cfg));
}

// How extract_class_prob combines objectness and class probability.
enum class ScoreMode { kProduct, kConditional };

inline void check_index(const DetectorConfig& cfg, std::size_t row, std::size_t col,
                        std::size_t box, std::size_t cls = 0) {
  if (row >= cfg.grid || col >= cfg.grid || box >= cfg.boxes || cls >= cfg.classes)
    throw std::out_of_range("detector index (" + std::to_string(row) + "," +
                            std::to_string(col) + "," + std::to_string(box) +
                            ") class " + std::to_string(cls) + " out of range");
}

// Detection score of box (row, col, b) for class y: objectness times
// class probability, or the conditional class probability alone.
inline ad::Var extract_class_prob(ad::Graph& g, ad::Var decoded,
                                  const DetectorConfig& cfg, std::size_t row,
                                  std::size_t col, std::size_t box, std::size_t cls,
                                  ScoreMode mode = ScoreMode::kProduct) {
  check_index(cfg, row, col, box, cls);
  std::size_t BC = cfg.box_channels();
  std::size_t base = (row * cfg.grid + col) * cfg.out_channels() + box * BC;
  const Tensor& d = g.value(decoded);
  double obj = d[base + 0], pc = d[base + 5 + cls];
  double val = mode == ScoreMode::kProduct ? obj * pc : pc;
  return g.make_node(Tensor::scalar(val), {decoded},
                     [decoded, base, cls, mode](ad::Graph& gg, ad::Var self) {
                       double go = gg.grad_ref(self)[0];
                       const Tensor& d2 = gg.value(decoded);
                       Tensor& gd = gg.grad_ref(decoded);
                       if (mode == ScoreMode::kProduct) {
                         gd[base + 0] += go * d2[base + 5 + cls];
                         gd[base + 5 + cls] += go * d2[base + 0];
                       } else {
                         gd[base + 5 + cls] += go;
                       }
                     });
}

inline ad::Var extract_box_conf(ad::Graph& g, ad::Var decoded,
                                const DetectorConfig& cfg, std::size_t row,
                                std::size_t col, std::size_t box) {
  check_index(cfg, row, col, box);
  std::size_t base = (row * cfg.grid + col) * cfg.out_channels() +
                     box * cfg.box_channels();
  return g.make_node(Tensor::scalar(g.value(decoded)[base]), {decoded},
                     [decoded, base](ad::Graph& gg, ad::Var self) {
                       gg.grad_ref(decoded)[base] += gg.grad_ref(self)[0];
                     });
}

// S x S x B tensor of per-box scores for one class.
inline ad::Var box_scores(ad::Graph& g, ad::Var decoded, const DetectorConfig& cfg,
                          std::size_t cls, ScoreMode mode = ScoreMode::kProduct) {
  check_index(cfg, 0, 0, 0, cls);
  std::size_t S = cfg.grid, B = cfg.boxes, BC = cfg.box_channels();
  const Tensor& d = g.value(decoded);
  Tensor out({S, S, B});
  for (std::size_t r = 0; r < S; ++r)
    for (std::size_t c = 0; c < S; ++c)
      for (std::size_t b = 0; b < B; ++b) {
        std::size_t base = (r * S + c) * B * BC + b * BC;
        out(r, c, b) = mode == ScoreMode::kProduct ? d[base] * d[base + 5 + cls]
                                                   : d[base + 5 + cls];
      }
  return g.make_node(std::move(out), {decoded},
                     [decoded, cls, B, BC, mode](ad::Graph& gg, ad::Var self) {
                       const Tensor& go = gg.grad_ref(self);
                       const Tensor& d2 = gg.value(decoded);
                       Tensor& gd = gg.grad_ref(decoded);
                       for (std::size_t i = 0; i < go.size(); ++i) {
                         std::size_t cell = i / B, b = i % B;
                         std::size_t base = cell * B * BC + b * BC;
                         if (mode == ScoreMode::kProduct) {
                           gd[base] += go[i] * d2[base + 5 + cls];
                           gd[base + 5 + cls] += go[i] * d2[base];
                         } else {
                           gd[base + 5 + cls] += go[i];
                         }
                       }
                     });
}

struct Detection {
  int class_id = 0;
  double score = 0;  // objectness * class probability
  Box box;
  std::size_t row = 0, col = 0, box_index = 0;
};

// Greedy per-class suppression: scan by descending score (ties by cell
// row-major then box index), keep a detection iff its IoU with every
// already-kept same-class detection stays below the threshold.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  if (!(iou_threshold > 0 && iou_threshold < 1))
    throw std::invalid_argument("nms: iou_threshold must be in (0,1)");
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.row != b.row) return a.row < b.row;
    if (a.col != b.col) return a.col < b.col;
    return a.box_index < b.box_index;
  });
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    bool keep = true;
    for (const Detection& k : kept) {
      if (k.class_id != d.class_id) continue;
      if (iou(k.box, d.box) >= iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(d);
  }
  return kept;
}

// Thresholded decoded boxes before suppression. A box survives when
// objectness * max class probability reaches the threshold (boundary
// equality is kept).
inline std::vector<Detection> threshold_detections(const DetectorConfig& cfg,
                                                   const Tensor& decoded) {
  std::size_t S = cfg.grid, B = cfg.boxes, C = cfg.classes, BC = cfg.box_channels();
  std::vector<Detection> out;
  for (std::size_t r = 0; r < S; ++r)
    for (std::size_t c = 0; c < S; ++c)
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = &decoded(r, c, b * BC);
        std::size_t best = 0;
        for (std::size_t j = 1; j < C; ++j)
          if (p[5 + j] > p[5 + best]) best = j;
        double score = p[0] * p[5 + best];
        if (score >= cfg.score_threshold)
          out.push_back(Detection{static_cast<int>(best), score,
                                  Box{p[1], p[2], p[3], p[4]}, r, c, b});
      }
  return out;
}

inline std::vector<Detection> detect(const DetectorModel& m, const Tensor& image) {
  Tensor decoded = decode(m.config, forward(m, image));
  return nms(threshold_detections(m.config, decoded), m.config.nms_iou_threshold);
}

}  // namespace signforge::det

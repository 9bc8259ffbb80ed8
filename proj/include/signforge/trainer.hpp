#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "signforge/detector.hpp"
#include "signforge/parallel.hpp"
#include "signforge/rng.hpp"

namespace signforge::det {

struct LabeledObject {
  int class_id = 0;
  Box box;  // normalized [0,1] coordinates
};

struct LabeledScene {
  Tensor image;
  std::vector<LabeledObject> objects;
};

// Responsibility assignment: the ground-truth object's center cell owns
// it, through the anchor with the highest IoU against the target box
// (boxes compared center-aligned, ties to the lower anchor index).
struct BoxAssignment {
  std::size_t row = 0, col = 0, box = 0;
  Box gt;
  int class_id = 0;
};

inline BoxAssignment assign_responsibility(const DetectorConfig& cfg,
                                           const LabeledObject& obj) {
  double S = static_cast<double>(cfg.grid);
  auto cell = [&](double v) {
    auto c = static_cast<long>(std::floor(v * S));
    return static_cast<std::size_t>(std::clamp<long>(c, 0, static_cast<long>(cfg.grid) - 1));
  };
  BoxAssignment a;
  a.row = cell(obj.box.cy);
  a.col = cell(obj.box.cx);
  a.gt = obj.box;
  a.class_id = obj.class_id;
  double best = -1.0;
  for (std::size_t b = 0; b < cfg.boxes; ++b) {
    Box anchor{obj.box.cx, obj.box.cy, cfg.anchors[b][0] / S, cfg.anchors[b][1] / S};
    double v = iou(anchor, obj.box);
    if (v > best) {
      best = v;
      a.box = b;
    }
  }
  return a;
}

// Squared-error detection loss over the decoded tensor:
//   5 * coord MSE (centers plus sqrt-sized extents) and a class MSE on
//   responsible boxes, objectness MSE with target 1 there and weight 0.5
//   toward 0 everywhere else.
inline ad::Var detection_loss(ad::Graph& g, ad::Var decoded, const DetectorConfig& cfg,
                              const std::vector<BoxAssignment>& assignments) {
  std::size_t S = cfg.grid, B = cfg.boxes, C = cfg.classes, BC = cfg.box_channels();
  const Tensor& d = g.value(decoded);
  std::vector<char> responsible(S * S * B, 0);
  for (const auto& a : assignments) responsible[(a.row * S + a.col) * B + a.box] = 1;
  double loss = 0.0;
  for (std::size_t i = 0; i < S * S * B; ++i) {
    if (responsible[i]) continue;
    double obj = d[(i / B) * B * BC + (i % B) * BC];
    loss += 0.5 * obj * obj;
  }
  for (const auto& a : assignments) {
    std::size_t base = (a.row * S + a.col) * B * BC + a.box * BC;
    double dcx = d[base + 1] - a.gt.cx;
    double dcy = d[base + 2] - a.gt.cy;
    double dw = std::sqrt(d[base + 3]) - std::sqrt(a.gt.w);
    double dh = std::sqrt(d[base + 4]) - std::sqrt(a.gt.h);
    loss += 5.0 * (dcx * dcx + dcy * dcy + dw * dw + dh * dh);
    double dobj = d[base + 0] - 1.0;
    loss += dobj * dobj;
    for (std::size_t j = 0; j < C; ++j) {
      double t = (static_cast<int>(j) == a.class_id) ? 1.0 : 0.0;
      double dp = d[base + 5 + j] - t;
      loss += dp * dp;
    }
  }
  auto resp = std::make_shared<std::vector<char>>(std::move(responsible));
  auto asg = std::make_shared<std::vector<BoxAssignment>>(assignments);
  return g.make_node(
      Tensor::scalar(loss), {decoded},
      [decoded, resp, asg, S, B, C, BC](ad::Graph& gg, ad::Var self) {
        double go = gg.grad_ref(self)[0];
        const Tensor& d2 = gg.value(decoded);
        Tensor& gd = gg.grad_ref(decoded);
        for (std::size_t i = 0; i < S * S * B; ++i) {
          if ((*resp)[i]) continue;
          std::size_t base = (i / B) * B * BC + (i % B) * BC;
          gd[base] += go * d2[base];  // 0.5 * 2 * obj
        }
        for (const auto& a : *asg) {
          std::size_t base = (a.row * S + a.col) * B * BC + a.box * BC;
          gd[base + 1] += go * 10.0 * (d2[base + 1] - a.gt.cx);
          gd[base + 2] += go * 10.0 * (d2[base + 2] - a.gt.cy);
          double sw = std::sqrt(d2[base + 3]);
          double sh = std::sqrt(d2[base + 4]);
          gd[base + 3] += go * 5.0 * (1.0 - std::sqrt(a.gt.w) / sw);
          gd[base + 4] += go * 5.0 * (1.0 - std::sqrt(a.gt.h) / sh);
          gd[base + 0] += go * 2.0 * (d2[base + 0] - 1.0);
          for (std::size_t j = 0; j < C; ++j) {
            double t = (static_cast<int>(j) == a.class_id) ? 1.0 : 0.0;
            gd[base + 5 + j] += go * 2.0 * (d2[base + 5 + j] - t);
          }
        }
      });
}

using TrainObserver = std::function<void(int epoch, double mean_loss)>;

// Plain minibatch SGD on the composite detection loss. Deterministic for
// a fixed seed: initialization, shuffling, and gradient reduction all run
// in fixed order regardless of worker count.
inline DetectorModel train_toy(const DetectorConfig& cfg, Arch arch,
                               const std::vector<LabeledScene>& dataset,
                               std::uint64_t seed, int epochs, double lr = 0.01,
                               std::size_t batch_size = 16,
                               const TrainObserver& observer = nullptr) {
  if (dataset.empty()) throw std::invalid_argument("train_toy: empty dataset");
  std::vector<char> seen(cfg.classes, 0);
  for (const auto& s : dataset)
    for (const auto& o : s.objects)
      if (o.class_id >= 0 && static_cast<std::size_t>(o.class_id) < cfg.classes)
        seen[o.class_id] = 1;
  for (std::size_t c = 0; c < cfg.classes; ++c)
    if (!seen[c])
      throw std::invalid_argument("train_toy: class " + std::to_string(c) +
                                  " not represented in dataset");

  DetectorModel model = random_init(cfg, arch, seed);
  if (epochs <= 0) return model;

  Pcg32 shuffle_rng(seed, 1);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  struct ItemGrads {
    std::vector<Tensor> kernels, biases;
    double loss = 0;
  };

  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = shuffle_rng.next_below(static_cast<std::uint32_t>(i));
      std::swap(order[i - 1], order[j]);
    }
    double epoch_loss = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      std::size_t count = std::min(batch_size, order.size() - start);
      std::vector<ItemGrads> grads(count);
      parallel_for(count, [&](std::size_t i) {
        const LabeledScene& sc = dataset[order[start + i]];
        ad::Graph g;
        ModelVars mv = lift(g, model, true);
        ad::Var raw = forward(g, model, mv, g.constant(sc.image));
        ad::Var dec = decode(g, raw, cfg);
        std::vector<BoxAssignment> asg;
        for (const auto& o : sc.objects) asg.push_back(assign_responsibility(cfg, o));
        ad::Var loss = detection_loss(g, dec, cfg, asg);
        g.backward(loss);
        ItemGrads ig;
        ig.loss = g.value(loss)[0];
        for (ad::Var k : mv.kernels) ig.kernels.push_back(g.grad(k));
        for (ad::Var b : mv.biases) ig.biases.push_back(g.grad(b));
        grads[i] = std::move(ig);
      });
      double batch_loss = 0.0;
      for (const auto& ig : grads) batch_loss += ig.loss;
      batch_loss /= static_cast<double>(count);
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("train_toy: loss diverged (non-finite) at epoch " +
                                 std::to_string(epoch) + " step " +
                                 std::to_string(steps));
      double step = lr / static_cast<double>(count);
      for (std::size_t t = 0; t < model.kernels.size(); ++t) {
        Tensor& w = model.kernels[t];
        for (const auto& ig : grads)
          for (std::size_t x = 0; x < w.size(); ++x) w[x] -= step * ig.kernels[t][x];
      }
      for (std::size_t t = 0; t < model.biases.size(); ++t) {
        Tensor& w = model.biases[t];
        for (const auto& ig : grads)
          for (std::size_t x = 0; x < w.size(); ++x) w[x] -= step * ig.biases[t][x];
      }
      epoch_loss += batch_loss;
      ++steps;
    }
    if (observer) observer(epoch, epoch_loss / static_cast<double>(steps));
  }
  return model;
}

}  // namespace signforge::det

#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>

#include "signforge/detector.hpp"
#include "signforge/gradcheck.hpp"
#include "signforge/model_io.hpp"
#include "signforge/rng.hpp"
#include "signforge/trainer.hpp"

using namespace signforge;
using det::Detection;
using det::DetectorConfig;
using det::DetectorModel;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Pcg32& rng, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

DetectorConfig toy_config() { return DetectorConfig{}; }

DetectorConfig tiny_config() {
  DetectorConfig cfg;
  cfg.grid = 1;
  cfg.input_size = 16;
  return cfg;
}

// Independent per-element decode oracle.
Tensor decode_oracle(const DetectorConfig& cfg, const Tensor& raw) {
  std::size_t S = cfg.grid, B = cfg.boxes, C = cfg.classes, BC = cfg.box_channels();
  Tensor out = raw;
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (std::size_t r = 0; r < S; ++r)
    for (std::size_t c = 0; c < S; ++c)
      for (std::size_t b = 0; b < B; ++b) {
        std::size_t base = (r * S + c) * B * BC + b * BC;
        out[base + 0] = sig(raw[base + 0]);
        out[base + 1] = (sig(raw[base + 1]) + static_cast<double>(c)) / static_cast<double>(S);
        out[base + 2] = (sig(raw[base + 2]) + static_cast<double>(r)) / static_cast<double>(S);
        out[base + 3] = cfg.anchors[b][0] * std::exp(raw[base + 3]) / static_cast<double>(S);
        out[base + 4] = cfg.anchors[b][1] * std::exp(raw[base + 4]) / static_cast<double>(S);
        double denom = 0.0;
        for (std::size_t j = 0; j < C; ++j) denom += std::exp(raw[base + 5 + j]);
        for (std::size_t j = 0; j < C; ++j)
          out[base + 5 + j] = std::exp(raw[base + 5 + j]) / denom;
      }
  return out;
}

// Independent greedy NMS: repeated linear scans instead of a sort.
std::vector<Detection> nms_oracle(const std::vector<Detection>& dets, double thr) {
  std::vector<Detection> kept;
  std::vector<bool> used(dets.size(), false);
  auto better = [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.row != b.row) return a.row < b.row;
    if (a.col != b.col) return a.col < b.col;
    return a.box_index < b.box_index;
  };
  for (std::size_t step = 0; step < dets.size(); ++step) {
    long pick = -1;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (used[i]) continue;
      if (pick < 0 || better(dets[i], dets[static_cast<std::size_t>(pick)]))
        pick = static_cast<long>(i);
    }
    if (pick < 0) break;
    auto p = static_cast<std::size_t>(pick);
    used[p] = true;
    bool keep = true;
    for (const auto& k : kept)
      if (k.class_id == dets[p].class_id && iou(k.box, dets[p].box) >= thr) keep = false;
    if (keep) kept.push_back(dets[p]);
  }
  return kept;
}

bool same_detections(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].class_id != b[i].class_id || a[i].score != b[i].score ||
        a[i].row != b[i].row || a[i].col != b[i].col ||
        a[i].box_index != b[i].box_index)
      return false;
  return true;
}

}  // namespace

TEST_CASE("full-scale configuration produces the 19x19x425 contract shape") {
  DetectorConfig cfg;
  cfg.grid = 19;
  cfg.boxes = 5;
  cfg.classes = 80;
  cfg.input_size = 304;
  cfg.anchors = {{0.6, 0.9}, {1.2, 1.2}, {1.9, 2.8}, {3.1, 2.2}, {4.4, 4.6}};
  DetectorModel m = det::random_init(cfg, det::Arch::kTiny4, 7);
  Pcg32 rng(1, 0);
  Tensor image = random_tensor({304, 304, 3}, rng, 0, 1);
  Tensor raw = det::forward(m, image);
  REQUIRE(raw.shape() == std::vector<std::size_t>{19, 19, 425});
}

TEST_CASE("toy configuration produces 7x7x18") {
  DetectorModel m = det::random_init(toy_config(), det::Arch::kTiny4, 3);
  Pcg32 rng(2, 0);
  Tensor raw = det::forward(m, random_tensor({112, 112, 3}, rng, 0, 1));
  REQUIRE(raw.shape() == std::vector<std::size_t>{7, 7, 18});
}

TEST_CASE("forward rejects wrong input shapes") {
  DetectorModel m = det::random_init(toy_config(), det::Arch::kTiny4, 3);
  REQUIRE_THROWS(det::forward(m, Tensor({64, 64, 3})));
  REQUIRE_THROWS(det::forward(m, Tensor({112, 112, 1})));
}

TEST_CASE("decode of zero logits gives centered anchor boxes") {
  DetectorConfig cfg = toy_config();
  Tensor raw({7, 7, 18});
  Tensor dec = det::decode(cfg, raw);
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < 7; ++c)
      for (std::size_t b = 0; b < 2; ++b) {
        const double* p = &dec(r, c, b * 9);
        CHECK(p[0] == 0.5);
        CHECK(p[1] == Catch::Approx((0.5 + c) / 7.0).margin(1e-15));
        CHECK(p[2] == Catch::Approx((0.5 + r) / 7.0).margin(1e-15));
        CHECK(p[3] == Catch::Approx(cfg.anchors[b][0] / 7.0).margin(1e-15));
        CHECK(p[4] == Catch::Approx(cfg.anchors[b][1] / 7.0).margin(1e-15));
        for (int j = 0; j < 4; ++j) CHECK(p[5 + j] == Catch::Approx(0.25).margin(1e-15));
      }
}

TEST_CASE("decode saturates the x offset toward the next cell") {
  DetectorConfig cfg = toy_config();
  Tensor raw({7, 7, 18});
  raw(2, 3, 1) = 20.0;  // t_x of box 0 in cell row 2, col 3
  Tensor dec = det::decode(cfg, raw);
  CHECK(dec(2, 3, 1) == Catch::Approx((3.0 + 1.0) / 7.0).margin(1e-8));
}

TEST_CASE("decode matches the per-element formula oracle") {
  DetectorConfig cfg = toy_config();
  Pcg32 rng(4, 0);
  Tensor raw = random_tensor({7, 7, 18}, rng, -3, 3);
  Tensor dec = det::decode(cfg, raw);
  Tensor expect = decode_oracle(cfg, raw);
  for (std::size_t i = 0; i < dec.size(); ++i)
    REQUIRE(dec[i] == Catch::Approx(expect[i]).margin(1e-12));
}

TEST_CASE("decode is monotone in the objectness logit and local to its box") {
  DetectorConfig cfg = toy_config();
  Pcg32 rng(5, 0);
  Tensor raw = random_tensor({7, 7, 18}, rng, -2, 2);
  Tensor bumped = raw;
  bumped(3, 4, 9) += 0.25;  // objectness logit of box 1 in cell (3,4)
  Tensor a = det::decode(cfg, raw), b = det::decode(cfg, bumped);
  std::size_t slot = (3 * 7 + 4) * 18 + 9;
  CHECK(b[slot] > a[slot]);
  for (std::size_t i = 0; i < a.size(); ++i)
    if (i != slot) REQUIRE(a[i] == b[i]);
}

TEST_CASE("extract ops return scores and reject bad indices") {
  DetectorConfig cfg = toy_config();
  Pcg32 rng(6, 0);
  Tensor raw = random_tensor({7, 7, 18}, rng, -2, 2);
  ad::Graph g;
  ad::Var dec = det::decode(g, g.constant(raw), cfg);
  const Tensor& d = g.value(dec);

  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t y = 0; y < 4; ++y) {
        std::size_t base = (r * 7 + r) * 18 + b * 9;  // diagonal cells
        double expect = d[base] * d[base + 5 + y];
        ad::Var v = det::extract_class_prob(g, dec, cfg, r, r, b, y);
        REQUIRE(g.value(v)[0] == Catch::Approx(expect).margin(1e-12));
        ad::Var cond = det::extract_class_prob(g, dec, cfg, r, r, b, y,
                                               det::ScoreMode::kConditional);
        REQUIRE(g.value(cond)[0] == Catch::Approx(d[base + 5 + y]).margin(1e-12));
        ad::Var conf = det::extract_box_conf(g, dec, cfg, r, r, b);
        REQUIRE(g.value(conf)[0] == d[base]);
      }
  REQUIRE_THROWS_AS(det::extract_box_conf(g, dec, cfg, 7, 0, 0), std::out_of_range);
  REQUIRE_THROWS_AS(det::extract_class_prob(g, dec, cfg, 0, 0, 2, 0), std::out_of_range);
  REQUIRE_THROWS_AS(det::extract_class_prob(g, dec, cfg, 0, 0, 0, 4), std::out_of_range);
}

TEST_CASE("extract_box_conf matches the sigmoid of the raw logit") {
  DetectorConfig cfg = tiny_config();
  for (double logit : {-20.0, -3.0, 0.0, 1.7}) {
    Tensor raw({1, 1, 18});
    raw[0] = logit;
    ad::Graph g;
    ad::Var dec = det::decode(g, g.constant(raw), cfg);
    double got = g.value(det::extract_box_conf(g, dec, cfg, 0, 0, 0))[0];
    REQUIRE(got == Catch::Approx(1.0 / (1.0 + std::exp(-logit))).margin(1e-12));
  }
}

TEST_CASE("nms keeps the higher of two identical boxes and all disjoint boxes") {
  Detection a{0, 0.9, Box{0.5, 0.5, 0.2, 0.2}, 0, 0, 0};
  Detection b{0, 0.8, Box{0.5, 0.5, 0.2, 0.2}, 1, 1, 0};
  auto kept = det::nms({a, b}, 0.45);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);

  Detection c{0, 0.7, Box{0.2, 0.2, 0.1, 0.1}, 0, 0, 0};
  Detection d{0, 0.6, Box{0.8, 0.8, 0.1, 0.1}, 1, 1, 0};
  CHECK(det::nms({c, d}, 0.45).size() == 2);

  REQUIRE_THROWS(det::nms({a}, 1.5));
}

TEST_CASE("nms agrees with the brute-force greedy reference on random sets") {
  Pcg32 rng(7, 0);
  for (int set = 0; set < 100; ++set) {
    std::vector<Detection> dets;
    for (int i = 0; i < 20; ++i) {
      Detection d;
      d.class_id = static_cast<int>(rng.next_below(3));
      d.score = rng.uniform(0.1, 1.0);
      d.box = Box{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.4),
                  rng.uniform(0.05, 0.4)};
      d.row = rng.next_below(7);
      d.col = rng.next_below(7);
      d.box_index = rng.next_below(2);
      dets.push_back(d);
    }
    auto got = det::nms(dets, 0.45);
    auto expect = nms_oracle(dets, 0.45);
    REQUIRE(same_detections(got, expect));
  }
}

TEST_CASE("threshold keeps the boundary product and drops everything below") {
  DetectorConfig cfg = tiny_config();
  // objectness 0.2 with best class probability 0.5: product exactly 0.1
  Tensor raw({1, 1, 18});
  raw[0] = std::log(0.2 / 0.8);
  raw[5] = std::log(0.5);
  raw[6] = std::log(0.3);
  raw[7] = std::log(0.1);
  raw[8] = std::log(0.1);
  raw[9] = -30.0;  // second box: objectness ~ 0
  Tensor dec = det::decode(cfg, raw);
  REQUIRE(dec[0] == Catch::Approx(0.2).margin(1e-12));
  REQUIRE(dec[5] == Catch::Approx(0.5).margin(1e-12));
  dec[0] = 0.2;  // pin the boundary exactly
  dec[5] = 0.5;
  auto kept = det::threshold_detections(cfg, dec);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].class_id == 0);
  CHECK(kept[0].score == 0.2 * 0.5);

  Tensor cold = Tensor::full({1, 1, 18}, -20.0);
  CHECK(det::threshold_detections(cfg, det::decode(cfg, cold)).empty());
}

TEST_CASE("a single strong crafted box yields exactly one detection") {
  DetectorConfig cfg = toy_config();
  Tensor raw = Tensor::full({7, 7, 18}, -20.0);
  std::size_t base = (2 * 7 + 5) * 18 + 9;  // cell (2,5), box 1
  raw[base + 0] = 4.0;
  raw[base + 5 + 3] = 8.0;  // class 3 dominates
  Tensor dec = det::decode(cfg, raw);
  auto kept = det::nms(det::threshold_detections(cfg, dec), cfg.nms_iou_threshold);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].row == 2);
  CHECK(kept[0].col == 5);
  CHECK(kept[0].box_index == 1);
  CHECK(kept[0].class_id == 3);
}

TEST_CASE("no emitted detection scores below the threshold; kept boxes are disjoint") {
  DetectorConfig cfg = toy_config();
  Pcg32 rng(8, 0);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor raw = random_tensor({7, 7, 18}, rng, -4, 4);
    Tensor dec = det::decode(cfg, raw);
    auto kept = det::nms(det::threshold_detections(cfg, dec), cfg.nms_iou_threshold);
    for (const auto& d : kept) {
      REQUIRE(d.score >= cfg.score_threshold);
      REQUIRE(d.box.w > 0);
      REQUIRE(d.box.h > 0);
    }
    for (std::size_t i = 0; i < kept.size(); ++i)
      for (std::size_t j = i + 1; j < kept.size(); ++j)
        if (kept[i].class_id == kept[j].class_id)
          REQUIRE(iou(kept[i].box, kept[j].box) < cfg.nms_iou_threshold);
  }
}

TEST_CASE("detection score chain is differentiable end to end") {
  DetectorConfig cfg = tiny_config();
  DetectorModel m = det::random_init(cfg, det::Arch::kTiny4, 11);
  ad::ScalarFn fn = [&](ad::Graph& g, ad::Var x) {
    det::ModelVars mv = det::lift(g, m, false);
    ad::Var raw = det::forward(g, m, mv, x);
    ad::Var dec = det::decode(g, raw, cfg);
    return det::extract_class_prob(g, dec, cfg, 0, 0, 1, 2);
  };
  Pcg32 rng(12, 0);
  Tensor image = random_tensor({16, 16, 3}, rng, 0.05, 0.95);
  auto r = ad::grad_check_refined(fn, image, 1e-4, 1e-4);
  INFO("worst " << r.worst_coord << " err " << r.max_rel_error);
  CHECK(r.ok(1e-4));
}

TEST_CASE("gradient of summed raw output w.r.t. the image passes finite differences") {
  DetectorConfig cfg = tiny_config();
  DetectorModel m = det::random_init(cfg, det::Arch::kTiny4, 13);
  ad::ScalarFn fn = [&](ad::Graph& g, ad::Var x) {
    det::ModelVars mv = det::lift(g, m, false);
    return g.sum_all(det::forward(g, m, mv, x));
  };
  Pcg32 rng(14, 0);
  Tensor image = random_tensor({16, 16, 3}, rng, 0.05, 0.95);
  auto r = ad::grad_check(fn, image, 1e-4);
  CHECK(r.ok(1e-4));
}

TEST_CASE("model serialization round-trips bit-exactly") {
  DetectorModel m = det::random_init(toy_config(), det::Arch::kTiny4B32, 21);
  std::string path = "test_model.mdet";
  cli::write_model(m, path);
  DetectorModel r = cli::read_model(path);
  REQUIRE(r.arch == m.arch);
  REQUIRE(r.config.grid == m.config.grid);
  REQUIRE(r.config.anchors == m.config.anchors);
  REQUIRE(r.config.score_threshold == m.config.score_threshold);
  REQUIRE(r.kernels.size() == m.kernels.size());
  for (std::size_t t = 0; t < m.kernels.size(); ++t)
    for (std::size_t i = 0; i < m.kernels[t].size(); ++i)
      REQUIRE(r.kernels[t][i] == m.kernels[t][i]);
  for (std::size_t t = 0; t < m.biases.size(); ++t)
    for (std::size_t i = 0; i < m.biases[t].size(); ++i)
      REQUIRE(r.biases[t][i] == m.biases[t][i]);
  std::remove(path.c_str());
}

TEST_CASE("trainer with zero epochs returns the seeded initialization") {
  DetectorConfig cfg = tiny_config();
  Pcg32 rng(31, 0);
  std::vector<det::LabeledScene> data;
  for (int c = 0; c < 4; ++c) {
    det::LabeledScene s;
    s.image = random_tensor({16, 16, 3}, rng, 0, 1);
    s.objects.push_back({c, Box{0.5, 0.5, 0.4, 0.4}});
    data.push_back(std::move(s));
  }
  DetectorModel trained = det::train_toy(cfg, det::Arch::kTiny4, data, 77, 0);
  DetectorModel init = det::random_init(cfg, det::Arch::kTiny4, 77);
  for (std::size_t t = 0; t < trained.kernels.size(); ++t)
    for (std::size_t i = 0; i < trained.kernels[t].size(); ++i)
      REQUIRE(trained.kernels[t][i] == init.kernels[t][i]);
}

TEST_CASE("training twice with one seed is bit-identical") {
  DetectorConfig cfg = tiny_config();
  Pcg32 rng(32, 0);
  std::vector<det::LabeledScene> data;
  for (int i = 0; i < 8; ++i) {
    det::LabeledScene s;
    s.image = random_tensor({16, 16, 3}, rng, 0, 1);
    s.objects.push_back({i % 4, Box{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7),
                                    rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.5)}});
    data.push_back(std::move(s));
  }
  DetectorModel a = det::train_toy(cfg, det::Arch::kTiny4, data, 5, 2, 0.01, 4);
  DetectorModel b = det::train_toy(cfg, det::Arch::kTiny4, data, 5, 2, 0.01, 4);
  for (std::size_t t = 0; t < a.kernels.size(); ++t)
    for (std::size_t i = 0; i < a.kernels[t].size(); ++i)
      REQUIRE(a.kernels[t][i] == b.kernels[t][i]);
  for (std::size_t t = 0; t < a.biases.size(); ++t)
    for (std::size_t i = 0; i < a.biases[t].size(); ++i)
      REQUIRE(a.biases[t][i] == b.biases[t][i]);
}

TEST_CASE("trainer rejects empty and class-incomplete datasets") {
  DetectorConfig cfg = tiny_config();
  REQUIRE_THROWS(det::train_toy(cfg, det::Arch::kTiny4, {}, 1, 1));
  det::LabeledScene only_zero;
  only_zero.image = Tensor({16, 16, 3});
  only_zero.objects.push_back({0, Box{0.5, 0.5, 0.3, 0.3}});
  REQUIRE_THROWS(det::train_toy(cfg, det::Arch::kTiny4, {only_zero}, 1, 1));
}

TEST_CASE("trainer loss decreases on a small fixed dataset") {
  DetectorConfig cfg = tiny_config();
  Pcg32 rng(33, 0);
  std::vector<det::LabeledScene> data;
  for (int i = 0; i < 16; ++i) {
    det::LabeledScene s;
    s.image = random_tensor({16, 16, 3}, rng, 0, 1);
    s.objects.push_back({i % 4, Box{0.5, 0.5, 0.5, 0.5}});
    data.push_back(std::move(s));
  }
  std::vector<double> losses;
  det::train_toy(cfg, det::Arch::kTiny4, data, 9, 8, 0.01, 8,
                 [&](int, double l) { losses.push_back(l); });
  REQUIRE(losses.size() == 8);
  CHECK(losses.back() < losses.front());
}

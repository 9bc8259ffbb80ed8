#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "signforge/autodiff.hpp"
#include "signforge/geometry.hpp"
#include "signforge/parallel.hpp"
#include "signforge/rng.hpp"
#include "signforge/trainer.hpp"

namespace signforge::scene {

// Class ids: 0 stop-octagon (the attack target), then distractor shapes.
enum ShapeClass : int {
  kStopOctagon = 0,
  kCircle = 1,
  kTriangle = 2,
  kRectangle = 3,
};

struct CanonicalObject {
  Tensor image;  // canonical-frame RGB, values in (0,1)
  Tensor alpha;  // same spatial dims, exactly {0,1}
  int class_id = 0;
};

// Procedural canonical shapes. Hard-edged silhouettes (alpha stays
// binary); warping supplies the soft edges. Fill colors sit strictly
// inside (0,1) so gradients survive the compositor's clipping.
inline CanonicalObject make_canonical(int class_id, std::size_t size = 64) {
  CanonicalObject o;
  o.class_id = class_id;
  o.image = Tensor({size, size, 3});
  o.alpha = Tensor({size, size});
  double S = static_cast<double>(size);
  double half = (S - 1.0) / 2.0;
  auto put = [&](std::size_t y, std::size_t x, double r, double g, double b) {
    o.image(y, x, 0) = r;
    o.image(y, x, 1) = g;
    o.image(y, x, 2) = b;
    o.alpha(y, x) = 1.0;
  };
  const double kInvSqrt2 = 0.7071067811865476;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double u = static_cast<double>(x) - half;
      double v = static_cast<double>(y) - half;
      switch (class_id) {
        case kStopOctagon: {
          double d = std::max({std::abs(u), std::abs(v), (std::abs(u) + std::abs(v)) * kInvSqrt2});
          double R = 0.47 * S;
          if (d <= R) {
            if (d > R - 0.075 * S)
              put(y, x, 0.93, 0.93, 0.93);  // rim
            else if (std::abs(v) <= 0.085 * S)
              put(y, x, 0.93, 0.93, 0.93);  // lettering band
            else
              put(y, x, 0.76, 0.07, 0.09);
          }
          break;
        }
        case kCircle: {
          double d = std::sqrt(u * u + v * v);
          double R = 0.45 * S;
          if (d <= R) {
            if (d > R - 0.08 * S)
              put(y, x, 0.92, 0.92, 0.92);
            else
              put(y, x, 0.10, 0.25, 0.80);
          }
          break;
        }
        case kTriangle: {
          // upward triangle via three half-plane tests
          double ax = 0.0, ay = -0.42 * S;
          double bx = -0.46 * S, by = 0.38 * S;
          double cx = 0.46 * S, cy = 0.38 * S;
          auto side = [&](double x0, double y0, double x1, double y1) {
            return (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0);
          };
          double s1 = side(ax, ay, bx, by), s2 = side(bx, by, cx, cy), s3 = side(cx, cy, ax, ay);
          if (s1 <= 0 && s2 <= 0 && s3 <= 0) {
            double m = std::min({-s1, -s2, -s3}) / S;
            if (m < 0.03 * S)
              put(y, x, 0.25, 0.18, 0.05);
            else
              put(y, x, 0.90, 0.78, 0.12);
          }
          break;
        }
        case kRectangle: {
          double hw = 0.42 * S, hh = 0.28 * S;
          if (std::abs(u) <= hw && std::abs(v) <= hh) {
            if (hw - std::abs(u) < 0.05 * S || hh - std::abs(v) < 0.05 * S)
              put(y, x, 0.92, 0.92, 0.92);
            else
              put(y, x, 0.12, 0.65, 0.25);
          }
          break;
        }
        default:
          throw std::invalid_argument("make_canonical: unknown class " +
                                      std::to_string(class_id));
      }
    }
  return o;
}

// Free-standing gray patch used by the creation attack; the whole square
// is paintable.
inline CanonicalObject make_patch(std::size_t size = 32) {
  CanonicalObject o;
  o.class_id = -1;
  o.image = Tensor::full({size, size, 3}, 0.5);
  o.alpha = Tensor::full({size, size}, 1.0);
  return o;
}

struct Range {
  double lo = 0, hi = 0;
  bool contains(double v) const { return v >= lo && v <= hi; }
  double width() const { return hi - lo; }
};

inline double sample(const Range& r, Pcg32& rng) { return rng.uniform(r.lo, r.hi); }

// One draw of object pose: Z-plane rotation, normalized center position,
// and object-to-image scale.
struct TransformSample {
  double rotation_deg = 0;
  double tx = 0.5, ty = 0.5;
  double scale = 0.3;
};

struct SceneDistribution {
  Range rotation_deg{-25.0, 25.0};
  Range translate_x{0.2, 0.8};
  Range translate_y{0.2, 0.8};
  Range scale{0.08, 0.65};
  Range gain{0.6, 1.4};
  std::uint64_t background_seed = 7;
  std::size_t background_count = 128;

  void validate() const {
    for (const Range* r : {&rotation_deg, &translate_x, &translate_y, &scale, &gain})
      if (!(r->hi >= r->lo)) throw std::invalid_argument("SceneDistribution: empty range");
    if (!(scale.lo > 0) || scale.hi > 1.0)
      throw std::invalid_argument("SceneDistribution: scale range must lie in (0,1]");
    if (!(gain.lo > 0)) throw std::invalid_argument("SceneDistribution: gain must be positive");
    if (background_count == 0)
      throw std::invalid_argument("SceneDistribution: background_count must be >= 1");
  }
};

// Draw order is part of the determinism contract: rotation, tx, ty, scale.
inline TransformSample sample_transform(const SceneDistribution& dist, Pcg32& rng) {
  TransformSample t;
  t.rotation_deg = sample(dist.rotation_deg, rng);
  t.tx = sample(dist.translate_x, rng);
  t.ty = sample(dist.translate_y, rng);
  t.scale = sample(dist.scale, rng);
  return t;
}

// Canonical frame -> scene frame map for a pose sample.
inline Affine2 affine_for(const TransformSample& t, std::size_t canonical_size,
                          std::size_t scene_size) {
  double pivot = (static_cast<double>(canonical_size) - 1.0) / 2.0;
  double k = t.scale * static_cast<double>(scene_size) / static_cast<double>(canonical_size);
  return Affine2::scale_rotate_about(pivot, pivot, k, t.rotation_deg,
                                     t.tx * (static_cast<double>(scene_size) - 1.0),
                                     t.ty * (static_cast<double>(scene_size) - 1.0));
}

// Procedural background: flat base color, low-frequency noise, a few
// muted distractor rectangles.
inline Tensor make_background(std::size_t size, Pcg32& rng) {
  Tensor bg({size, size, 3});
  double base[3];
  for (double& c : base) c = rng.uniform(0.25, 0.75);
  constexpr std::size_t kGrid = 8;
  double coarse[kGrid * kGrid * 3];
  for (double& v : coarse) v = rng.uniform(-0.12, 0.12);
  double step = static_cast<double>(size) / static_cast<double>(kGrid - 1);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double gx = static_cast<double>(x) / step, gy = static_cast<double>(y) / step;
      std::size_t x0 = std::min(static_cast<std::size_t>(gx), kGrid - 2);
      std::size_t y0 = std::min(static_cast<std::size_t>(gy), kGrid - 2);
      double wx = gx - static_cast<double>(x0), wy = gy - static_cast<double>(y0);
      for (std::size_t c = 0; c < 3; ++c) {
        double n00 = coarse[(y0 * kGrid + x0) * 3 + c];
        double n01 = coarse[(y0 * kGrid + x0 + 1) * 3 + c];
        double n10 = coarse[((y0 + 1) * kGrid + x0) * 3 + c];
        double n11 = coarse[((y0 + 1) * kGrid + x0 + 1) * 3 + c];
        double n = (1 - wy) * ((1 - wx) * n00 + wx * n01) + wy * ((1 - wx) * n10 + wx * n11);
        bg(y, x, c) = std::min(1.0, std::max(0.0, base[c] + n));
      }
    }
  std::size_t rects = rng.next_below(4);
  for (std::size_t r = 0; r < rects; ++r) {
    double col[3];
    for (std::size_t c = 0; c < 3; ++c) col[c] = 0.5 * base[c] + 0.5 * rng.uniform(0.3, 0.7);
    std::size_t w = static_cast<std::size_t>(rng.uniform(0.1, 0.35) * static_cast<double>(size));
    std::size_t h = static_cast<std::size_t>(rng.uniform(0.1, 0.35) * static_cast<double>(size));
    std::size_t x0 = rng.next_below(static_cast<std::uint32_t>(size - std::min(w, size - 1)));
    std::size_t y0 = rng.next_below(static_cast<std::uint32_t>(size - std::min(h, size - 1)));
    for (std::size_t y = y0; y < std::min(size, y0 + h); ++y)
      for (std::size_t x = x0; x < std::min(size, x0 + w); ++x)
        for (std::size_t c = 0; c < 3; ++c) bg(y, x, c) = col[c];
  }
  return bg;
}

inline std::vector<Tensor> make_background_set(std::size_t count, std::size_t size,
                                               std::uint64_t seed) {
  std::vector<Tensor> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    Pcg32 rng(seed, i);
    out[i] = make_background(size, rng);
  }
  return out;
}

// Warped object alpha in scene coordinates (zero where the object does
// not cover the scene).
inline ad::Var warp_alpha(ad::Graph& g, const Tensor& alpha, const Affine2& tf,
                          std::size_t scene_size) {
  ad::Var a3 = g.constant(Tensor({alpha.dim(0), alpha.dim(1), 1},
                                 std::vector<double>(alpha.data(), alpha.data() + alpha.size())));
  ad::Var warped = g.bilinear_warp(a3, g.constant(tf.to_tensor()), scene_size, scene_size);
  return g.reshape(warped, {scene_size, scene_size});
}

// gain * (alpha * object + (1 - alpha) * background), clipped to [0,1].
// Differentiable w.r.t. the canonical object pixels.
inline ad::Var compose_scene(ad::Graph& g, const Tensor& background,
                             ad::Var object_image, const Tensor& object_alpha,
                             const TransformSample& t, double gain) {
  if (background.rank() != 3 || background.dim(2) != 3 ||
      background.dim(0) != background.dim(1))
    throw std::invalid_argument("compose_scene: background must be NxNx3");
  std::size_t scene_size = background.dim(0);
  const Tensor& obj = g.value(object_image);
  Affine2 tf = affine_for(t, obj.dim(0), scene_size);
  ad::Var wobj = g.bilinear_warp(object_image, g.constant(tf.to_tensor()),
                                 scene_size, scene_size);
  ad::Var walpha = warp_alpha(g, object_alpha, tf, scene_size);
  ad::Var mixed = g.blend(wobj, g.constant(background), walpha);
  return g.clip01(g.scale(mixed, gain));
}

struct ComposedScene {
  Tensor image;
  Tensor warped_alpha;
};

inline ComposedScene compose_scene(const Tensor& background, const CanonicalObject& obj,
                                   const TransformSample& t, double gain) {
  ad::Graph g;
  std::size_t scene_size = background.dim(0);
  Affine2 tf = affine_for(t, obj.image.dim(0), scene_size);
  ad::Var out = compose_scene(g, background, g.constant(obj.image), obj.alpha, t, gain);
  ad::Var walpha = warp_alpha(g, obj.alpha, tf, scene_size);
  return {g.value(out), g.value(walpha)};
}

// Canonical object with the masked perturbation applied:
// clip(object + mask * delta). With delta = 0 this reproduces the clean
// object bit-for-bit.
inline ad::Var perturbed_object(ad::Graph& g, const CanonicalObject& obj,
                                ad::Var delta, const Tensor& mask) {
  return g.clip01(g.add(g.constant(obj.image), g.mask_mul(delta, mask)));
}

// The alignment map: the masked perturbation pushed through the same
// affine as the object it rides on.
inline ad::Var align_perturbation(ad::Graph& g, ad::Var delta, const Tensor& mask,
                                  const TransformSample& t, std::size_t canonical_size,
                                  std::size_t scene_size) {
  Affine2 tf = affine_for(t, canonical_size, scene_size);
  return g.bilinear_warp(g.mask_mul(delta, mask), g.constant(tf.to_tensor()),
                         scene_size, scene_size);
}

inline ad::Var perturbed_scene(ad::Graph& g, const Tensor& background,
                               const CanonicalObject& obj, ad::Var delta,
                               const Tensor& mask, const TransformSample& t,
                               double gain) {
  return compose_scene(g, background, perturbed_object(g, obj, delta, mask),
                       obj.alpha, t, gain);
}

// Simulated approach video: object scale ramps geometrically from far to
// near while pose and lighting jitter frame to frame. Frame k draws from
// the stream (seed, base_stream + k), so frames are independent of
// evaluation order.
struct SweepConfig {
  std::size_t n_frames = 60;
  double scale_far = 0.08;
  double scale_near = 0.6;
  double lateral_drift = 0.0;  // total tx travel across the sweep
  Range rotation_jitter{-5.0, 5.0};
  Range translate_jitter{-0.02, 0.02};
  Range gain{0.9, 1.1};
  std::size_t scene_size = 112;
  std::uint64_t background_seed = 101;
  std::size_t background_count = 12;
};

inline SweepConfig indoor_sweep() { return SweepConfig{}; }

inline SweepConfig outdoor_sweep() {
  SweepConfig s;
  s.rotation_jitter = {-25.0, 25.0};
  s.gain = {0.6, 1.4};
  s.lateral_drift = 0.55;
  s.translate_jitter = {-0.04, 0.04};
  return s;
}

inline TransformSample sweep_pose(const SweepConfig& sw, std::size_t frame, Pcg32& rng) {
  double u = sw.n_frames > 1
                 ? static_cast<double>(frame) / static_cast<double>(sw.n_frames - 1)
                 : 0.0;
  TransformSample t;
  t.scale = sw.scale_far * std::pow(sw.scale_near / sw.scale_far, u);
  t.rotation_deg = sample(sw.rotation_jitter, rng);
  t.tx = 0.5 + sw.lateral_drift * (u - 0.5) + sample(sw.translate_jitter, rng);
  t.ty = 0.5 + sample(sw.translate_jitter, rng);
  return t;
}

inline std::vector<Tensor> render_sweep(const CanonicalObject& obj,
                                        const Tensor* mask, const Tensor* delta,
                                        const SweepConfig& sw, std::uint64_t seed) {
  if (sw.n_frames < 1) throw std::invalid_argument("render_sweep: n_frames >= 1");
  std::vector<Tensor> bgs =
      make_background_set(sw.background_count, sw.scene_size, sw.background_seed);
  std::vector<Tensor> frames(sw.n_frames);
  parallel_for(sw.n_frames, [&](std::size_t k) {
    Pcg32 rng(seed, k);
    const Tensor& bg = bgs[rng.next_below(static_cast<std::uint32_t>(bgs.size()))];
    TransformSample t = sweep_pose(sw, k, rng);
    double gain = sample(sw.gain, rng);
    ad::Graph g;
    ad::Var out;
    if (mask && delta)
      out = perturbed_scene(g, bg, obj, g.constant(*delta), *mask, t, gain);
    else
      out = compose_scene(g, bg, g.constant(obj.image), obj.alpha, t, gain);
    frames[k] = g.value(out);
  });
  return frames;
}

// Tight bounding box of the nonzero pixels of a warped alpha, in
// normalized coordinates. Nonzero means > 1e-12 (the interpolation
// fringe counts as coverage).
inline std::optional<Box> tight_bbox(const Tensor& alpha) {
  std::size_t h = alpha.dim(0), w = alpha.dim(1);
  std::size_t x0 = w, x1 = 0, y0 = h, y1 = 0;
  bool any = false;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (alpha(y, x) > 1e-12) {
        any = true;
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  if (!any) return std::nullopt;
  Box b;
  b.w = static_cast<double>(x1 - x0 + 1) / static_cast<double>(w);
  b.h = static_cast<double>(y1 - y0 + 1) / static_cast<double>(h);
  b.cx = (static_cast<double>(x0 + x1) + 1.0) / (2.0 * static_cast<double>(w));
  b.cy = (static_cast<double>(y0 + y1) + 1.0) / (2.0 * static_cast<double>(h));
  return b;
}

// Labeled training corpus: one uniformly drawn shape per scene on a
// procedural background. Scene i draws from stream (seed, i).
inline std::vector<det::LabeledScene> synth_dataset(std::size_t n,
                                                    const SceneDistribution& dist,
                                                    std::size_t image_size,
                                                    std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("synth_dataset: n >= 1");
  dist.validate();
  std::vector<CanonicalObject> shapes;
  for (int c = 0; c < 4; ++c) shapes.push_back(make_canonical(c));
  std::vector<det::LabeledScene> out(n);
  parallel_for(n, [&](std::size_t i) {
    Pcg32 rng(seed, i);
    int cls = static_cast<int>(rng.next_below(4));
    Tensor bg = make_background(image_size, rng);
    TransformSample t = sample_transform(dist, rng);
    double gain = sample(dist.gain, rng);
    ComposedScene cs = compose_scene(bg, shapes[cls], t, gain);
    det::LabeledScene scene;
    scene.image = std::move(cs.image);
    if (auto box = tight_bbox(cs.warped_alpha))
      scene.objects.push_back(det::LabeledObject{cls, *box});
    out[i] = std::move(scene);
  });
  return out;
}

}  // namespace signforge::scene

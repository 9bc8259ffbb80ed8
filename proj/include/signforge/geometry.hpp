#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "signforge/tensor.hpp"

namespace signforge {

// 2x3 affine map p_out = A * p_in + t over (x, y) points, x = column,
// y = row. Stored row-major: [[a00 a01 tx], [a10 a11 ty]].
struct Affine2 {
  double a00 = 1, a01 = 0, tx = 0;
  double a10 = 0, a11 = 1, ty = 0;

  static Affine2 identity() { return {}; }

  static Affine2 from_tensor(const Tensor& t) {
    if (t.rank() != 2 || t.dim(0) != 2 || t.dim(1) != 3)
      throw std::invalid_argument("Affine2: expected 2x3 tensor, got " +
                                  shape_string(t.shape()));
    return {t(0, 0), t(0, 1), t(0, 2), t(1, 0), t(1, 1), t(1, 2)};
  }

  Tensor to_tensor() const {
    return Tensor({2, 3}, {a00, a01, tx, a10, a11, ty});
  }

  double det() const { return a00 * a11 - a01 * a10; }

  // Composition of scale, rotation (degrees, counter-clockwise), then
  // translation: p -> s*R*(p - pivot) + target.
  static Affine2 scale_rotate_about(double pivot_x, double pivot_y, double scale,
                                    double rotation_deg, double target_x,
                                    double target_y) {
    double rad = rotation_deg * (M_PI / 180.0);
    double c = std::cos(rad) * scale;
    double s = std::sin(rad) * scale;
    Affine2 m;
    m.a00 = c;
    m.a01 = -s;
    m.a10 = s;
    m.a11 = c;
    m.tx = target_x - (m.a00 * pivot_x + m.a01 * pivot_y);
    m.ty = target_y - (m.a10 * pivot_x + m.a11 * pivot_y);
    return m;
  }

  Affine2 inverse() const {
    double d = det();
    if (std::abs(d) <= 1e-9)
      throw std::invalid_argument("Affine2: singular transform (|det| <= 1e-9)");
    Affine2 inv;
    inv.a00 = a11 / d;
    inv.a01 = -a01 / d;
    inv.a10 = -a10 / d;
    inv.a11 = a00 / d;
    inv.tx = -(inv.a00 * tx + inv.a01 * ty);
    inv.ty = -(inv.a10 * tx + inv.a11 * ty);
    return inv;
  }

  void apply(double x, double y, double& ox, double& oy) const {
    ox = a00 * x + a01 * y + tx;
    oy = a10 * x + a11 * y + ty;
  }
};

// Axis-aligned box as (center x, center y, width, height), normalized
// image coordinates.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;

  double x0() const { return cx - w / 2; }
  double x1() const { return cx + w / 2; }
  double y0() const { return cy - h / 2; }
  double y1() const { return cy + h / 2; }
  double area() const { return w * h; }
};

inline double iou(const Box& a, const Box& b) {
  double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  double inter = ix * iy;
  double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

}  // namespace signforge

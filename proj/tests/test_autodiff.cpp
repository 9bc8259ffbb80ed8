#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "signforge/autodiff.hpp"
#include "signforge/geometry.hpp"
#include "signforge/gradcheck.hpp"
#include "signforge/rng.hpp"

using namespace signforge;
using ad::Graph;
using ad::Var;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Pcg32& rng, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Independent direct-summation convolution used as the oracle.
Tensor conv_oracle(const Tensor& in, const Tensor& k, int stride, int pad) {
  std::size_t kk = k.dim(0), ci = k.dim(2), co = k.dim(3);
  std::size_t oh = (in.dim(0) + 2 * pad - kk) / stride + 1;
  std::size_t ow = (in.dim(1) + 2 * pad - kk) / stride + 1;
  Tensor out({oh, ow, co});
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x)
      for (std::size_t o = 0; o < co; ++o) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < kk; ++ky)
          for (std::size_t kx = 0; kx < kk; ++kx)
            for (std::size_t c = 0; c < ci; ++c) {
              long iy = static_cast<long>(y * stride + ky) - pad;
              long ix = static_cast<long>(x * stride + kx) - pad;
              if (iy < 0 || iy >= static_cast<long>(in.dim(0)) || ix < 0 ||
                  ix >= static_cast<long>(in.dim(1)))
                continue;
              acc += in(iy, ix, c) * k(ky, kx, c, o);
            }
        out(y, x, o) = acc;
      }
  return out;
}

// Independent per-pixel inverse-map bilinear warp oracle.
Tensor warp_oracle(const Tensor& in, const Affine2& fwd, std::size_t oh, std::size_t ow) {
  Affine2 inv = fwd.inverse();
  std::size_t c = in.dim(2);
  Tensor out({oh, ow, c});
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double qx, qy;
      inv.apply(static_cast<double>(x), static_cast<double>(y), qx, qy);
      long x0 = static_cast<long>(std::floor(qx));
      long y0 = static_cast<long>(std::floor(qy));
      double wx = qx - std::floor(qx), wy = qy - std::floor(qy);
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto fetch = [&](long yy, long xx) -> double {
          if (yy < 0 || yy >= static_cast<long>(in.dim(0)) || xx < 0 ||
              xx >= static_cast<long>(in.dim(1)))
            return 0.0;
          return in(yy, xx, ch);
        };
        out(y, x, ch) = (1 - wy) * ((1 - wx) * fetch(y0, x0) + wx * fetch(y0, x0 + 1)) +
                        wy * ((1 - wx) * fetch(y0 + 1, x0) + wx * fetch(y0 + 1, x0 + 1));
      }
    }
  return out;
}

}  // namespace

TEST_CASE("conv2d identity kernel reproduces the input exactly") {
  Pcg32 rng(1, 0);
  Tensor in = random_tensor({5, 4, 3}, rng);
  Tensor k({1, 1, 3, 3});
  k(0, 0, 0, 0) = 1;
  k(0, 0, 1, 1) = 1;
  k(0, 0, 2, 2) = 1;
  Graph g;
  Var out = g.conv2d(g.constant(in), g.constant(k), 1, 0);
  REQUIRE(g.value(out).same_shape(in));
  for (std::size_t i = 0; i < in.size(); ++i) REQUIRE(g.value(out)[i] == in[i]);
}

TEST_CASE("conv2d of zero input is zero") {
  Pcg32 rng(2, 0);
  Tensor in({6, 6, 2});
  Tensor k = random_tensor({3, 3, 2, 4}, rng);
  Graph g;
  Var out = g.conv2d(g.constant(in), g.constant(k), 1, 1);
  for (std::size_t i = 0; i < g.value(out).size(); ++i) CHECK(g.value(out)[i] == 0.0);
}

TEST_CASE("conv2d matches the direct-summation oracle") {
  Pcg32 rng(3, 0);
  for (auto [stride, pad] : {std::pair{1, 0}, {1, 1}, {2, 1}}) {
    Tensor in = random_tensor({5, 5, 1}, rng);
    Tensor k = random_tensor({3, 3, 1, 1}, rng);
    Graph g;
    Var out = g.conv2d(g.constant(in), g.constant(k), stride, pad);
    Tensor expect = conv_oracle(in, k, stride, pad);
    REQUIRE(g.value(out).same_shape(expect));
    for (std::size_t i = 0; i < expect.size(); ++i)
      REQUIRE(g.value(out)[i] == Catch::Approx(expect[i]).margin(1e-12));
  }
  // multi-channel case
  Tensor in = random_tensor({7, 6, 3}, rng);
  Tensor k = random_tensor({3, 3, 3, 5}, rng);
  Graph g;
  Var out = g.conv2d(g.constant(in), g.constant(k), 1, 1);
  Tensor expect = conv_oracle(in, k, 1, 1);
  for (std::size_t i = 0; i < expect.size(); ++i)
    REQUIRE(g.value(out)[i] == Catch::Approx(expect[i]).margin(1e-12));
}

TEST_CASE("conv2d rejects channel mismatch with a shape diagnostic") {
  Graph g;
  Var in = g.constant(Tensor({5, 5, 3}));
  Var k = g.constant(Tensor({3, 3, 2, 4}));
  REQUIRE_THROWS_WITH(g.conv2d(in, k, 1, 0),
                      Catch::Matchers::ContainsSubstring("channels"));
}

TEST_CASE("activations match scalar references") {
  Graph g;
  Var zero = g.constant(Tensor::scalar(0.0));
  CHECK(g.value(g.sigmoid(zero))[0] == 0.5);
  Var neg = g.constant(Tensor::scalar(-1.0));
  CHECK(g.value(g.leaky_relu(neg, 0.1))[0] == Catch::Approx(-0.1).margin(1e-15));
  for (int x = -4; x <= 4; ++x) {
    Var v = g.constant(Tensor::scalar(x));
    double ref = 1.0 / (1.0 + std::exp(-static_cast<double>(x)));
    CHECK(g.value(g.sigmoid(v))[0] == Catch::Approx(ref).margin(1e-12));
  }
  REQUIRE_THROWS(g.leaky_relu(zero, 1.5));
}

TEST_CASE("softmax_channels is symmetric, overflow-safe, and exact") {
  Graph g;
  Var flat = g.softmax_channels(g.constant(Tensor({4}, {0, 0, 0, 0})));
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(g.value(flat)[i] == Catch::Approx(0.25).margin(1e-15));

  Var big = g.softmax_channels(g.constant(Tensor({2}, {1000.0, 0.0})));
  REQUIRE(g.value(big).all_finite());
  CHECK(g.value(big)[0] == Catch::Approx(1.0).margin(1e-12));
  CHECK(g.value(big)[1] == Catch::Approx(0.0).margin(1e-12));

  Pcg32 rng(4, 0);
  Tensor in = random_tensor({4}, rng, -3, 3);
  Var out = g.softmax_channels(g.constant(in));
  double mx = std::max({in[0], in[1], in[2], in[3]});
  double sum = 0.0;
  for (std::size_t i = 0; i < 4; ++i) sum += std::exp(in[i] - mx);
  for (std::size_t i = 0; i < 4; ++i)
    REQUIRE(g.value(out)[i] == Catch::Approx(std::exp(in[i] - mx) / sum).margin(1e-12));
}

TEST_CASE("softmax_channels sums to one per position and preserves argmax") {
  Pcg32 rng(5, 0);
  Tensor in = random_tensor({3, 4, 6}, rng, -5, 5);
  Graph g;
  Var out = g.softmax_channels(g.constant(in));
  const Tensor& p = g.value(out);
  for (std::size_t base = 0; base < p.size(); base += 6) {
    double sum = 0.0;
    std::size_t arg_in = 0, arg_out = 0;
    for (std::size_t j = 0; j < 6; ++j) {
      sum += p[base + j];
      if (in[base + j] > in[base + arg_in]) arg_in = j;
      if (p[base + j] > p[base + arg_out]) arg_out = j;
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(arg_in == arg_out);
  }
}

TEST_CASE("bilinear_warp with the identity transform is bit-exact") {
  Pcg32 rng(6, 0);
  Tensor in = random_tensor({5, 7, 3}, rng);
  Graph g;
  Var out = g.bilinear_warp(g.constant(in), g.constant(Affine2::identity().to_tensor()));
  for (std::size_t i = 0; i < in.size(); ++i) REQUIRE(g.value(out)[i] == in[i]);
}

TEST_CASE("bilinear_warp integer translation shifts with zero fill") {
  Pcg32 rng(7, 0);
  Tensor in = random_tensor({4, 5, 1}, rng);
  Affine2 shift = Affine2::identity();
  shift.tx = 1.0;  // content moves one column right
  Graph g;
  Var out = g.bilinear_warp(g.constant(in), g.constant(shift.to_tensor()));
  const Tensor& o = g.value(out);
  for (std::size_t y = 0; y < 4; ++y) {
    REQUIRE(o(y, 0, 0) == 0.0);
    for (std::size_t x = 1; x < 5; ++x) REQUIRE(o(y, x, 0) == in(y, x - 1, 0));
  }
}

TEST_CASE("bilinear_warp rotation matches the inverse-map oracle") {
  Tensor in({2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
  Affine2 rot = Affine2::scale_rotate_about(0.5, 0.5, 1.0, 90.0, 0.5, 0.5);
  Graph g;
  Var out = g.bilinear_warp(g.constant(in), g.constant(rot.to_tensor()));
  Tensor expect = warp_oracle(in, rot, 2, 2);
  for (std::size_t i = 0; i < expect.size(); ++i)
    REQUIRE(g.value(out)[i] == Catch::Approx(expect[i]).margin(1e-12));

  Pcg32 rng(8, 0);
  Tensor img = random_tensor({6, 6, 2}, rng, 0, 1);
  Affine2 tf = Affine2::scale_rotate_about(2.5, 2.5, 1.3, 37.0, 3.1, 2.2);
  Var out2 = g.bilinear_warp(g.constant(img), g.constant(tf.to_tensor()), 8, 9);
  Tensor expect2 = warp_oracle(img, tf, 8, 9);
  for (std::size_t i = 0; i < expect2.size(); ++i)
    REQUIRE(g.value(out2)[i] == Catch::Approx(expect2[i]).margin(1e-12));
}

TEST_CASE("bilinear_warp rejects singular transforms") {
  Graph g;
  Tensor singular({2, 3}, {1, 1, 0, 1, 1, 0});
  REQUIRE_THROWS(g.bilinear_warp(g.constant(Tensor({2, 2, 1})), g.constant(singular)));
}

TEST_CASE("reduce_max returns value and first row-major index") {
  Graph g;
  auto all_equal = g.reduce_max(g.constant(Tensor::full({2, 3}, 4.25)));
  CHECK(all_equal.max_value == 4.25);
  CHECK(all_equal.index == std::vector<std::size_t>{0, 0});

  Tensor hot({4, 3});
  hot(2, 1) = 5.0;
  auto one = g.reduce_max(g.constant(hot));
  CHECK(one.max_value == 5.0);
  CHECK(one.index == std::vector<std::size_t>{2, 1});

  Pcg32 rng(9, 0);
  Tensor t = random_tensor({3, 4, 5}, rng);
  auto got = g.reduce_max(g.constant(t));
  double best = t[0];
  std::size_t arg = 0;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] > best) {
      best = t[i];
      arg = i;
    }
  CHECK(got.max_value == best);
  CHECK(got.index == t.multi_index(arg));
}

TEST_CASE("backward computes 2x for sum of squares") {
  Pcg32 rng(10, 0);
  Tensor x = random_tensor({3, 3}, rng);
  Graph g;
  Var leaf = g.leaf(x);
  Var loss = g.sum_all(g.mul(leaf, leaf));
  g.backward(loss);
  const Tensor& grad = g.grad(leaf);
  for (std::size_t i = 0; i < x.size(); ++i)
    REQUIRE(grad[i] == Catch::Approx(2.0 * x[i]).margin(1e-12));
}

TEST_CASE("leaves off the path to the output get zero gradient") {
  Graph g;
  Var used = g.leaf(Tensor::full({2}, 1.0));
  Var unused = g.leaf(Tensor::full({2}, 3.0));
  Var loss = g.sum_all(used);
  g.backward(loss);
  CHECK(g.grad(unused)[0] == 0.0);
  CHECK(g.grad(unused)[1] == 0.0);
  CHECK(g.grad(used)[0] == 1.0);
}

TEST_CASE("backward rejects non-scalar outputs") {
  Graph g;
  Var leaf = g.leaf(Tensor::full({2, 2}, 1.0));
  REQUIRE_THROWS(g.backward(leaf));
}

TEST_CASE("a leaf used twice accumulates both adjoint contributions") {
  Pcg32 rng(11, 0);
  Tensor x = random_tensor({4}, rng, 0.1, 0.9);
  ad::ScalarFn fn = [](Graph& g, Var v) {
    // v appears twice: sum(v * v) + sum(v)
    return g.add(g.sum_all(g.mul(v, v)), g.sum_all(v));
  };
  auto r = ad::grad_check(fn, x, 1e-4);
  CHECK(r.ok(1e-7));
}

TEST_CASE("grad_check is near-exact for linear functions") {
  Pcg32 rng(12, 0);
  Tensor x = random_tensor({5}, rng);
  ad::ScalarFn fn = [](Graph& g, Var v) { return g.scale(g.sum_all(v), 3.0); };
  auto r = ad::grad_check(fn, x, 1e-4);
  CHECK(r.max_rel_error < 1e-9);
}

TEST_CASE("grad_check on sum of squares") {
  Pcg32 rng(13, 0);
  Tensor x = random_tensor({6}, rng);
  ad::ScalarFn fn = [](Graph& g, Var v) { return g.sum_all(g.mul(v, v)); };
  auto r = ad::grad_check(fn, x, 1e-4);
  CHECK(r.max_rel_error < 1e-7);
}

TEST_CASE("grad_check across the op set at random points") {
  Pcg32 rng(14, 0);
  auto check_many = [&](const ad::ScalarFn& fn, std::vector<std::size_t> shape,
                        double lo, double hi, double tol) {
    for (int trial = 0; trial < 10; ++trial) {
      Tensor p = random_tensor(shape, rng, lo, hi);
      auto r = ad::grad_check(fn, p, 1e-4);
      INFO("trial " << trial << " worst coord " << r.worst_coord << " err "
                    << r.max_rel_error);
      REQUIRE(r.ok(tol));
    }
  };

  Pcg32 krng(140, 0);
  Tensor kernel = random_tensor({3, 3, 2, 3}, krng);
  Tensor conv_weights = random_tensor({4, 4, 3}, krng);
  check_many(
      [&](Graph& g, Var v) {
        return g.sum_all(g.mul(g.conv2d(v, g.constant(kernel), 1, 1),
                               g.constant(conv_weights)));
      },
      {4, 4, 2}, -1, 1, 1e-4);

  Tensor input4 = random_tensor({4, 4, 2}, krng);
  check_many(
      [&](Graph& g, Var k) {
        return g.sum_all(g.conv2d(g.constant(input4), k, 2, 1));
      },
      {3, 3, 2, 3}, -1, 1, 1e-4);

  check_many([](Graph& g, Var v) { return g.sum_all(g.sigmoid(v)); }, {3, 3}, -2, 2, 1e-4);
  // keep points away from the leaky kink at 0
  check_many([](Graph& g, Var v) { return g.sum_all(g.leaky_relu(v, 0.1)); }, {3, 3},
             0.1, 2.0, 1e-4);
  check_many([](Graph& g, Var v) { return g.sum_all(g.mul(g.softmax_channels(v), v)); },
             {2, 5}, -2, 2, 1e-4);
  check_many(
      [](Graph& g, Var v) {
        return g.sum_all(g.max_pool2(v));
      },
      {4, 4, 2}, -1, 1, 1e-3);

  Tensor img = random_tensor({5, 5, 2}, krng, 0, 1);
  Affine2 tf = Affine2::scale_rotate_about(2.0, 2.0, 0.8, 25.0, 2.3, 2.6);
  Tensor weights = random_tensor({5, 5, 2}, krng);
  check_many(
      [&](Graph& g, Var v) {
        return g.sum_all(
            g.mul(g.bilinear_warp(v, g.constant(tf.to_tensor())), g.constant(weights)));
      },
      {5, 5, 2}, 0, 1, 1e-4);

  // warp gradient w.r.t. the transform entries, perturbed near tf
  check_many(
      [&](Graph& g, Var t) {
        return g.sum_all(g.mul(g.bilinear_warp(g.constant(img), t), g.constant(weights)));
      },
      {2, 3}, 0.3, 0.9, 1e-4);

  Tensor alpha = random_tensor({3, 3}, krng, 0.1, 0.9);
  Tensor bg = random_tensor({3, 3, 2}, krng, 0, 1);
  check_many(
      [&](Graph& g, Var v) {
        return g.sum_all(g.blend(v, g.constant(bg), g.constant(alpha)));
      },
      {3, 3, 2}, 0, 1, 1e-4);

  Tensor mask({3, 3});
  for (std::size_t i = 0; i < 9; ++i) mask[i] = (i % 2 == 0) ? 1.0 : 0.0;
  check_many(
      [&](Graph& g, Var v) {
        return g.sum_all(g.mul(g.mask_mul(v, mask), v));
      },
      {3, 3, 2}, -1, 1, 1e-4);

  // clip01 passthrough region only
  check_many([](Graph& g, Var v) { return g.sum_all(g.clip01(v)); }, {3, 3}, 0.05, 0.95,
             1e-4);
}

TEST_CASE("grad_check handles reduce_max away from ties") {
  Pcg32 rng(15, 0);
  ad::ScalarFn fn = [](Graph& g, Var v) { return g.reduce_max(g.mul(v, v)).value; };
  for (int trial = 0; trial < 5; ++trial) {
    Tensor p = random_tensor({5}, rng, 0.1, 2.0);
    // enforce a clear gap so h=1e-4 cannot flip the argmax
    p[trial % 5] = 3.0;
    auto r = ad::grad_check(fn, p, 1e-4);
    REQUIRE(r.ok(1e-4));
  }
}

TEST_CASE("max_pool2 picks maxima with first-in-row-major ties") {
  Tensor in({2, 2, 1}, {1.0, 1.0, 1.0, 1.0});
  Graph g;
  Var leaf = g.leaf(in);
  Var out = g.max_pool2(leaf);
  REQUIRE(g.value(out).size() == 1);
  CHECK(g.value(out)[0] == 1.0);
  g.backward(g.sum_all(out));
  const Tensor& grad = g.grad(leaf);
  CHECK(grad[0] == 1.0);  // first element wins the tie
  CHECK(grad[1] == 0.0);
  CHECK(grad[2] == 0.0);
  CHECK(grad[3] == 0.0);
}

TEST_CASE("forward ops keep finite inputs finite") {
  Pcg32 rng(16, 0);
  Tensor x = random_tensor({4, 4, 2}, rng, -50, 50);
  Graph g;
  Var v = g.constant(x);
  CHECK(g.value(g.sigmoid(v)).all_finite());
  CHECK(g.value(g.softmax_channels(v)).all_finite());
  CHECK(g.value(g.clip01(v)).all_finite());
  CHECK(g.value(g.max_pool2(v)).all_finite());
}

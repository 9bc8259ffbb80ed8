#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "signforge/geometry.hpp"
#include "signforge/tensor.hpp"

namespace signforge::ad {

class Graph;

// Handle to a node on a Graph's tape.
struct Var {
  std::uint32_t id = 0;
};

enum class Activation { kSigmoid, kLeakyRelu };

// Reverse-mode tape. Ops record forward values in execution order; the
// backward pass walks the tape in exact reverse order, accumulating
// adjoints into per-node buffers. One graph per optimization run,
// single-threaded; recorded Tensors are immutable.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, Var)>;

  Var leaf(Tensor value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, nullptr);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }

  bool needs_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Adjoint buffer, allocated to zeros on first touch. Backward closures
  // accumulate (+=) into these.
  Tensor& grad_ref(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty() || n.grad.size() != n.value.size())
      n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
  }

  // Gradient of the last backward() w.r.t. v; zero for nodes off the path.
  const Tensor& grad(Var v) { return grad_ref(v); }

  // Registers a custom op node. fn receives this graph and the new node's
  // handle; it must add d(output)/d(input) * grad(self) into each
  // differentiable input's grad_ref.
  Var make_node(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (Var in : inputs) rg = rg || nodes_[in.id].requires_grad;
    return push(std::move(value), rg, rg ? std::move(fn) : nullptr);
  }

  std::size_t node_count() const { return nodes_.size(); }

  // Seeds d(output)/d(output) = 1 and sweeps the tape in reverse recorded
  // order. The output must be a scalar (single element).
  void backward(Var output) {
    if (nodes_[output.id].value.size() != 1)
      throw std::invalid_argument(
          "backward: output must be scalar, got shape " +
          shape_string(nodes_[output.id].value.shape()));
    grad_ref(output)[0] += 1.0;
    for (std::uint32_t id = output.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || !n.requires_grad || n.grad.empty()) continue;
      n.backward(*this, Var{id});
    }
  }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    check_same_shape("add", a, b);
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    return make_node(std::move(out), {a, b}, [a, b](Graph& g, Var self) {
      const Tensor& go = g.grad_ref(self);
      if (g.needs_grad(a)) {
        Tensor& ga = g.grad_ref(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (g.needs_grad(b)) {
        Tensor& gb = g.grad_ref(b);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape("sub", a, b);
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return make_node(std::move(out), {a, b}, [a, b](Graph& g, Var self) {
      const Tensor& go = g.grad_ref(self);
      if (g.needs_grad(a)) {
        Tensor& ga = g.grad_ref(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (g.needs_grad(b)) {
        Tensor& gb = g.grad_ref(b);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    check_same_shape("mul", a, b);
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return make_node(std::move(out), {a, b}, [a, b](Graph& g, Var self) {
      const Tensor& go = g.grad_ref(self);
      const Tensor& va = g.value(a);
      const Tensor& vb2 = g.value(b);
      if (g.needs_grad(a)) {
        Tensor& ga = g.grad_ref(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * vb2[i];
      }
      if (g.needs_grad(b)) {
        Tensor& gb = g.grad_ref(b);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * va[i];
      }
    });
  }

  Var scale(Var a, double c) {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
    return make_node(std::move(out), {a}, [a, c](Graph& g, Var self) {
      const Tensor& go = g.grad_ref(self);
      Tensor& ga = g.grad_ref(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    });
  }

  // x clamped to [0, 1]; subgradient passes only strictly inside.
  Var clip01(Var a) {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = std::min(1.0, std::max(0.0, out[i]));
    return make_node(std::move(out), {a}, [a](Graph& g, Var self) {
      const Tensor& go = g.grad_ref(self);
      const Tensor& va = g.value(a);
      Tensor& ga = g.grad_ref(a);
      for (std::size_t i = 0; i < go.size(); ++i)
        if (va[i] > 0.0 && va[i] < 1.0) ga[i] += go[i];
    });
  }

  Var activation(Var a, Activation kind, double alpha = 0.1) {
    if (kind == Activation::kLeakyRelu && !(alpha > 0.0 && alpha < 1.0))
      throw std::invalid_argument("activation: leaky slope must be in (0,1)");
    Tensor out = value(a);
    if (kind == Activation::kSigmoid) {
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    } else {
      for (std::size_t i = 0; i < out.size(); ++i)
        if (out[i] < 0.0) out[i] *= alpha;
    }
    return make_node(std::move(out), {a}, [a, kind, alpha](Graph& g, Var self) {
      const Tensor& go = g.grad_ref(self);
      const Tensor& vo = g.value(self);
      const Tensor& va = g.value(a);
      Tensor& ga = g.grad_ref(a);
      if (kind == Activation::kSigmoid) {
        for (std::size_t i = 0; i < go.size(); ++i)
          ga[i] += go[i] * vo[i] * (1.0 - vo[i]);
      } else {
        for (std::size_t i = 0; i < go.size(); ++i)
          ga[i] += go[i] * (va[i] >= 0.0 ? 1.0 : alpha);
      }
    });
  }

  Var sigmoid(Var a) { return activation(a, Activation::kSigmoid); }
  Var leaky_relu(Var a, double alpha) {
    return activation(a, Activation::kLeakyRelu, alpha);
  }

  // Softmax over the last dimension, max-subtracted for overflow safety.
  Var softmax_channels(Var a) {
    const Tensor& va = value(a);
    if (va.rank() < 1)
      throw std::invalid_argument("softmax_channels: rank >= 1 required");
    std::size_t c = va.dim(va.rank() - 1);
    Tensor out = va;
    for (std::size_t base = 0; base < out.size(); base += c) {
      double m = out[base];
      for (std::size_t j = 1; j < c; ++j) m = std::max(m, out[base + j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        out[base + j] = std::exp(out[base + j] - m);
        sum += out[base + j];
      }
      for (std::size_t j = 0; j < c; ++j) out[base + j] /= sum;
    }
    return make_node(std::move(out), {a}, [a, c](Graph& g, Var self) {
      const Tensor& go = g.grad_ref(self);
      const Tensor& p = g.value(self);
      Tensor& ga = g.grad_ref(a);
      for (std::size_t base = 0; base < go.size(); base += c) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += go[base + j] * p[base + j];
        for (std::size_t j = 0; j < c; ++j)
          ga[base + j] += p[base + j] * (go[base + j] - dot);
      }
    });
  }

  // ---- image / network ops ----

  // input HxWxCin, kernel kxkxCinxCout, zero padding. Output spatial dims
  // are floor((dim + 2*padding - k)/stride) + 1.
  Var conv2d(Var input, Var kernel, int stride = 1, int padding = 0) {
    const Tensor& in = value(input);
    const Tensor& k = value(kernel);
    if (in.rank() != 3)
      throw std::invalid_argument("conv2d: input must be HxWxC, got " +
                                  shape_string(in.shape()));
    if (k.rank() != 4)
      throw std::invalid_argument("conv2d: kernel must be kxkxCinxCout, got " +
                                  shape_string(k.shape()));
    std::size_t kk = k.dim(0);
    if (k.dim(1) != kk || kk % 2 == 0)
      throw std::invalid_argument("conv2d: kernel must be square with odd side");
    if (k.dim(2) != in.dim(2))
      throw std::invalid_argument(
          "conv2d: input channels " + std::to_string(in.dim(2)) +
          " do not match kernel Cin " + std::to_string(k.dim(2)));
    if (stride < 1 || padding < 0)
      throw std::invalid_argument("conv2d: stride >= 1, padding >= 0 required");
    if (in.dim(0) + 2 * static_cast<std::size_t>(padding) < kk ||
        in.dim(1) + 2 * static_cast<std::size_t>(padding) < kk)
      throw std::invalid_argument("conv2d: input (plus padding) smaller than kernel");
    std::size_t oh = (in.dim(0) + 2 * padding - kk) / stride + 1;
    std::size_t ow = (in.dim(1) + 2 * padding - kk) / stride + 1;
    Tensor out({oh, ow, k.dim(3)});
    conv2d_forward(in, k, stride, padding, out);
    return make_node(std::move(out), {input, kernel},
                     [input, kernel, stride, padding](Graph& g, Var self) {
                       conv2d_backward(g.value(input), g.value(kernel),
                                       g.grad_ref(self), stride, padding,
                                       g.needs_grad(input) ? &g.grad_ref(input) : nullptr,
                                       g.needs_grad(kernel) ? &g.grad_ref(kernel) : nullptr);
                     });
  }

  // Adds bias[c] to every spatial position of channel c.
  Var bias_add(Var input, Var bias) {
    const Tensor& in = value(input);
    const Tensor& b = value(bias);
    if (in.rank() != 3 || b.rank() != 1 || b.dim(0) != in.dim(2))
      throw std::invalid_argument("bias_add: need HxWxC input and C bias");
    Tensor out = in;
    std::size_t c = b.dim(0);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % c];
    return make_node(std::move(out), {input, bias}, [input, bias, c](Graph& g, Var self) {
      const Tensor& go = g.grad_ref(self);
      if (g.needs_grad(input)) {
        Tensor& gi = g.grad_ref(input);
        for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
      }
      if (g.needs_grad(bias)) {
        Tensor& gb = g.grad_ref(bias);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i % c] += go[i];
      }
    });
  }

  // 2x2 max pooling, stride 2. Ties route the adjoint to the first
  // winner in row-major order.
  Var max_pool2(Var input) {
    const Tensor& in = value(input);
    if (in.rank() != 3 || in.dim(0) % 2 != 0 || in.dim(1) % 2 != 0)
      throw std::invalid_argument("max_pool2: HxWxC with even H, W required");
    std::size_t oh = in.dim(0) / 2, ow = in.dim(1) / 2, c = in.dim(2);
    Tensor out({oh, ow, c});
    auto winners = std::make_shared<std::vector<std::uint32_t>>(out.size());
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double best = in(2 * y, 2 * x, ch);
          std::size_t arg = (2 * y * in.dim(1) + 2 * x) * c + ch;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              double v = in(2 * y + dy, 2 * x + dx, ch);
              if (v > best) {
                best = v;
                arg = ((2 * y + dy) * in.dim(1) + 2 * x + dx) * c + ch;
              }
            }
          out(y, x, ch) = best;
          (*winners)[(y * ow + x) * c + ch] = static_cast<std::uint32_t>(arg);
        }
    return make_node(std::move(out), {input}, [input, winners](Graph& g, Var self) {
      const Tensor& go = g.grad_ref(self);
      Tensor& gi = g.grad_ref(input);
      for (std::size_t i = 0; i < go.size(); ++i) gi[(*winners)[i]] += go[i];
    });
  }

  // Warps image (HxWxC) by the forward affine map `transform` (2x3 Var):
  // output(o) = bilinear(image, T^-1(o)), zero (transparent) outside the
  // input. Differentiable in both the image and the transform entries.
  Var bilinear_warp(Var image, Var transform, std::size_t out_h = 0,
                    std::size_t out_w = 0) {
    const Tensor& in = value(image);
    if (in.rank() != 3)
      throw std::invalid_argument("bilinear_warp: image must be HxWxC");
    Affine2 fwd = Affine2::from_tensor(value(transform));
    Affine2 inv = fwd.inverse();  // rejects singular transforms
    if (out_h == 0) out_h = in.dim(0);
    if (out_w == 0) out_w = in.dim(1);
    std::size_t c = in.dim(2);
    Tensor out({out_h, out_w, c});
    std::size_t ih = in.dim(0), iw = in.dim(1);
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        double qx, qy;
        inv.apply(static_cast<double>(ox), static_cast<double>(oy), qx, qy);
        bilinear_sample(in, ih, iw, c, qx, qy, &out(oy, ox, 0));
      }
    return make_node(
        std::move(out), {image, transform},
        [image, transform, inv, out_h, out_w, c](Graph& g, Var self) {
          warp_backward(g, image, transform, self, inv, out_h, out_w, c);
        });
  }

  // out = alpha * fg + (1 - alpha) * bg, alpha rank-2 HxW over HxWxC images.
  Var blend(Var fg, Var bg, Var alpha) {
    const Tensor& f = value(fg);
    const Tensor& b = value(bg);
    const Tensor& a = value(alpha);
    if (f.rank() != 3 || !f.same_shape(b) || a.rank() != 2 ||
        a.dim(0) != f.dim(0) || a.dim(1) != f.dim(1))
      throw std::invalid_argument("blend: need HxWxC fg/bg and HxW alpha");
    std::size_t c = f.dim(2);
    Tensor out = f;
    for (std::size_t p = 0; p < a.size(); ++p) {
      double av = a[p];
      for (std::size_t ch = 0; ch < c; ++ch)
        out[p * c + ch] = av * f[p * c + ch] + (1.0 - av) * b[p * c + ch];
    }
    return make_node(std::move(out), {fg, bg, alpha}, [fg, bg, alpha, c](Graph& g, Var self) {
      const Tensor& go = g.grad_ref(self);
      const Tensor& a2 = g.value(alpha);
      if (g.needs_grad(fg)) {
        Tensor& gf = g.grad_ref(fg);
        for (std::size_t p = 0; p < a2.size(); ++p)
          for (std::size_t ch = 0; ch < c; ++ch)
            gf[p * c + ch] += go[p * c + ch] * a2[p];
      }
      if (g.needs_grad(bg)) {
        Tensor& gb = g.grad_ref(bg);
        for (std::size_t p = 0; p < a2.size(); ++p)
          for (std::size_t ch = 0; ch < c; ++ch)
            gb[p * c + ch] += go[p * c + ch] * (1.0 - a2[p]);
      }
      if (g.needs_grad(alpha)) {
        Tensor& ga = g.grad_ref(alpha);
        const Tensor& f2 = g.value(fg);
        const Tensor& b2 = g.value(bg);
        for (std::size_t p = 0; p < a2.size(); ++p)
          for (std::size_t ch = 0; ch < c; ++ch)
            ga[p] += go[p * c + ch] * (f2[p * c + ch] - b2[p * c + ch]);
      }
    });
  }

  // Per-pixel multiply of HxWxC by a constant HxW mask.
  Var mask_mul(Var x, Tensor mask) {
    const Tensor& v = value(x);
    if (v.rank() != 3 || mask.rank() != 2 || mask.dim(0) != v.dim(0) ||
        mask.dim(1) != v.dim(1))
      throw std::invalid_argument("mask_mul: need HxWxC input and HxW mask");
    std::size_t c = v.dim(2);
    Tensor out = v;
    for (std::size_t p = 0; p < mask.size(); ++p)
      for (std::size_t ch = 0; ch < c; ++ch) out[p * c + ch] *= mask[p];
    auto m = std::make_shared<Tensor>(std::move(mask));
    return make_node(std::move(out), {x}, [x, m, c](Graph& g, Var self) {
      const Tensor& go = g.grad_ref(self);
      Tensor& gx = g.grad_ref(x);
      for (std::size_t p = 0; p < m->size(); ++p)
        for (std::size_t ch = 0; ch < c; ++ch)
          gx[p * c + ch] += go[p * c + ch] * (*m)[p];
    });
  }

  // Same data, new shape (element count must match).
  Var reshape(Var a, std::vector<std::size_t> shape) {
    Tensor out(std::move(shape), std::vector<double>(value(a).data(),
                                                     value(a).data() + value(a).size()));
    return make_node(std::move(out), {a}, [a](Graph& g, Var self) {
      const Tensor& go = g.grad_ref(self);
      Tensor& ga = g.grad_ref(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }

  // ---- reductions ----

  Var sum_all(Var a) {
    const Tensor& va = value(a);
    double s = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) s += va[i];
    return make_node(Tensor::scalar(s), {a}, [a](Graph& g, Var self) {
      double go = g.grad_ref(self)[0];
      Tensor& ga = g.grad_ref(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go;
    });
  }

  Var mean_all(Var a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(value(a).size()));
  }

  struct MaxReduce {
    Var value;
    std::vector<std::size_t> index;  // first maximizer in row-major order
    double max_value = 0;
  };

  // Max over all elements; the backward pass routes the entire adjoint to
  // the first maximizer in row-major order (deterministic tie-break).
  MaxReduce reduce_max(Var a) {
    const Tensor& va = value(a);
    if (va.size() == 0) throw std::invalid_argument("reduce_max: empty tensor");
    std::size_t arg = 0;
    double best = va[0];
    for (std::size_t i = 1; i < va.size(); ++i)
      if (va[i] > best) {
        best = va[i];
        arg = i;
      }
    std::vector<std::size_t> index = va.multi_index(arg);
    Var node = make_node(Tensor::scalar(best), {a}, [a, arg](Graph& g, Var self) {
      g.grad_ref(a)[arg] += g.grad_ref(self)[0];
    });
    return {node, std::move(index), best};
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(fn)});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void check_same_shape(const char* op, Var a, Var b) const {
    if (!value(a).same_shape(value(b)))
      throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                  shape_string(value(a).shape()) + " vs " +
                                  shape_string(value(b).shape()));
  }

  static void conv2d_forward(const Tensor& in, const Tensor& k, int stride,
                             int padding, Tensor& out) {
    std::size_t ih = in.dim(0), iw = in.dim(1), ci = in.dim(2);
    std::size_t kk = k.dim(0), co = k.dim(3);
    std::size_t oh = out.dim(0), ow = out.dim(1);
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double* op = &out(oy, ox, 0);
        for (std::size_t ky = 0; ky < kk; ++ky) {
          long iy = static_cast<long>(oy) * stride - padding + static_cast<long>(ky);
          if (iy < 0 || iy >= static_cast<long>(ih)) continue;
          for (std::size_t kx = 0; kx < kk; ++kx) {
            long ix = static_cast<long>(ox) * stride - padding + static_cast<long>(kx);
            if (ix < 0 || ix >= static_cast<long>(iw)) continue;
            const double* ip = &in(iy, ix, 0);
            const double* kp = &k(ky, kx, 0, 0);
            for (std::size_t c = 0; c < ci; ++c) {
              double a = ip[c];
              const double* kpc = kp + c * co;
              for (std::size_t o = 0; o < co; ++o) op[o] += a * kpc[o];
            }
          }
        }
      }
  }

  static void conv2d_backward(const Tensor& in, const Tensor& k,
                              const Tensor& gout, int stride, int padding,
                              Tensor* gin, Tensor* gkernel) {
    std::size_t ih = in.dim(0), iw = in.dim(1), ci = in.dim(2);
    std::size_t kk = k.dim(0), co = k.dim(3);
    std::size_t oh = gout.dim(0), ow = gout.dim(1);
    // Kernel transposed to kxkxCoutxCin so the input-gradient inner loop
    // runs unit-stride while keeping a fixed accumulation order.
    Tensor kt;
    if (gin) {
      kt = Tensor({kk, kk, co, ci});
      for (std::size_t ky = 0; ky < kk; ++ky)
        for (std::size_t kx = 0; kx < kk; ++kx)
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t o = 0; o < co; ++o)
              kt(ky, kx, o, c) = k(ky, kx, c, o);
    }
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double* gp = &gout(oy, ox, 0);
        for (std::size_t ky = 0; ky < kk; ++ky) {
          long iy = static_cast<long>(oy) * stride - padding + static_cast<long>(ky);
          if (iy < 0 || iy >= static_cast<long>(ih)) continue;
          for (std::size_t kx = 0; kx < kk; ++kx) {
            long ix = static_cast<long>(ox) * stride - padding + static_cast<long>(kx);
            if (ix < 0 || ix >= static_cast<long>(iw)) continue;
            if (gin) {
              double* gip = &(*gin)(iy, ix, 0);
              for (std::size_t o = 0; o < co; ++o) {
                double gv = gp[o];
                const double* ktp = &kt(ky, kx, o, 0);
                for (std::size_t c = 0; c < ci; ++c) gip[c] += gv * ktp[c];
              }
            }
            if (gkernel) {
              const double* ip = &in(iy, ix, 0);
              double* gkp = &(*gkernel)(ky, kx, 0, 0);
              for (std::size_t c = 0; c < ci; ++c) {
                double a = ip[c];
                double* gkc = gkp + c * co;
                for (std::size_t o = 0; o < co; ++o) gkc[o] += a * gp[o];
              }
            }
          }
        }
      }
  }

  // Bilinear fetch with zero fill outside the image; writes C channels.
  static void bilinear_sample(const Tensor& in, std::size_t ih, std::size_t iw,
                              std::size_t c, double x, double y, double* out) {
    double fx = std::floor(x), fy = std::floor(y);
    long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
    double wx = x - fx, wy = y - fy;
    for (std::size_t ch = 0; ch < c; ++ch) out[ch] = 0.0;
    if (x0 < -1 || x0 >= static_cast<long>(iw) || y0 < -1 ||
        y0 >= static_cast<long>(ih))
      return;
    const double w[4] = {(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx};
    const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
    const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
    for (int t = 0; t < 4; ++t) {
      if (ys[t] < 0 || ys[t] >= static_cast<long>(ih) || xs[t] < 0 ||
          xs[t] >= static_cast<long>(iw))
        continue;
      const double* ip = &in(ys[t], xs[t], 0);
      for (std::size_t ch = 0; ch < c; ++ch) out[ch] += w[t] * ip[ch];
    }
  }

  static void warp_backward(Graph& g, Var image, Var transform, Var self,
                            const Affine2& inv, std::size_t out_h,
                            std::size_t out_w, std::size_t c) {
    const Tensor& go = g.grad_ref(self);
    const Tensor& in = g.value(image);
    std::size_t ih = in.dim(0), iw = in.dim(1);
    Tensor* gi = g.needs_grad(image) ? &g.grad_ref(image) : nullptr;
    Tensor* gt = g.needs_grad(transform) ? &g.grad_ref(transform) : nullptr;
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const double* gp = &go[(oy * out_w + ox) * c];
        double qx, qy;
        inv.apply(static_cast<double>(ox), static_cast<double>(oy), qx, qy);
        double fx = std::floor(qx), fy = std::floor(qy);
        long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
        if (x0 < -1 || x0 >= static_cast<long>(iw) || y0 < -1 ||
            y0 >= static_cast<long>(ih))
          continue;
        double wx = qx - fx, wy = qy - fy;
        const double w[4] = {(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx};
        // d(weight)/dqx and d(weight)/dqy per corner
        const double dwx[4] = {-(1 - wy), (1 - wy), -wy, wy};
        const double dwy[4] = {-(1 - wx), -wx, (1 - wx), wx};
        const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
        const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
        double gqx = 0.0, gqy = 0.0;
        for (int t = 0; t < 4; ++t) {
          if (ys[t] < 0 || ys[t] >= static_cast<long>(ih) || xs[t] < 0 ||
              xs[t] >= static_cast<long>(iw))
            continue;
          std::size_t base = (static_cast<std::size_t>(ys[t]) * iw +
                              static_cast<std::size_t>(xs[t])) * c;
          for (std::size_t ch = 0; ch < c; ++ch) {
            double gch = gp[ch];
            if (gi) (*gi)[base + ch] += gch * w[t];
            if (gt) {
              double v = in[base + ch];
              gqx += gch * dwx[t] * v;
              gqy += gch * dwy[t] * v;
            }
          }
        }
        if (gt) {
          // q = Inv * (o - t), so dq/d(t) = -Inv column and
          // dq/dA_mn = -q_n * Inv[:,m] via d(A^-1) = -A^-1 dA A^-1.
          Tensor& gT = *gt;
          double cx0 = gqx * inv.a00 + gqy * inv.a10;
          double cx1 = gqx * inv.a01 + gqy * inv.a11;
          gT(0, 0) += -qx * cx0;
          gT(0, 1) += -qy * cx0;
          gT(0, 2) += -cx0;
          gT(1, 0) += -qx * cx1;
          gT(1, 1) += -qy * cx1;
          gT(1, 2) += -cx1;
        }
      }
  }

  // Deque keeps node references stable while ops keep recording.
  std::deque<Node> nodes_;
};

}  // namespace signforge::ad

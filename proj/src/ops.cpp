#include "im2tex/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "im2tex/errors.hpp"
#include "im2tex/simd/kernels.hpp"

namespace im2tex {
namespace {

using Impl = detail::TensorImpl;
using ImplPtr = std::shared_ptr<Impl>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor finish(Shape shape, std::vector<double> data, bool track, std::string_view op,
              Tape::BackwardFn fn) {
  round_to_precision(data);
  Tensor out(std::move(shape), std::move(data));
  if (track) {
    out.set_requires_grad(true);
    active_tape()->record(op, out, std::move(fn));
  }
  return out;
}

const simd::KernelTable& k() { return simd::kernels(); }

std::vector<double> transposed(const double* x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = x[r * cols + c];
  }
  return t;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
}

// Applies an elementwise map whose derivative is expressed through the input
// x and the output y.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, std::string_view op, Fwd fwd, Deriv deriv) {
  const bool track = tracking({&x});
  std::vector<double> out(x.size());
  const auto xs = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xs[i]);
  ImplPtr xi = x.impl();
  return finish(x.shape(), std::move(out), track, op, [xi, deriv](const Impl& o) {
    std::vector<double> g(o.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * deriv(xi->data[i], o.data[i]);
    xi->accumulate_grad(g);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), kk = a.dim(1), n = b.dim(1);
  const bool track = tracking({&a, &b});
  std::vector<double> c(m * n);
  k().matmul(a.values().data(), b.values().data(), c.data(), m, kk, n);
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish({m, n}, std::move(c), track, "matmul", [ai, bi, m, kk, n](const Impl& o) {
    if (ai->requires_grad) {
      const auto bt = transposed(bi->data.data(), kk, n);
      std::vector<double> ga(m * kk);
      k().matmul(o.grad.data(), bt.data(), ga.data(), m, n, kk);
      ai->accumulate_grad(ga);
    }
    if (bi->requires_grad) {
      const auto at = transposed(ai->data.data(), m, kk);
      std::vector<double> gb(kk * n);
      k().matmul(at.data(), o.grad.data(), gb.data(), kk, m, n);
      bi->accumulate_grad(gb);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool track = tracking({&a, &b});
  std::vector<double> out(a.size());
  k().add(a.values().data(), b.values().data(), out.data(), out.size());
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish(a.shape(), std::move(out), track, "add", [ai, bi](const Impl& o) {
    ai->accumulate_grad(o.grad);
    bi->accumulate_grad(o.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const bool track = tracking({&a, &b});
  std::vector<double> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish(a.shape(), std::move(out), track, "sub", [ai, bi](const Impl& o) {
    ai->accumulate_grad(o.grad);
    if (bi->requires_grad) {
      std::vector<double> g(o.grad.size());
      k().scale(o.grad.data(), -1.0, g.data(), g.size());
      bi->accumulate_grad(g);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool track = tracking({&a, &b});
  std::vector<double> out(a.size());
  k().mul(a.values().data(), b.values().data(), out.data(), out.size());
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish(a.shape(), std::move(out), track, "mul", [ai, bi](const Impl& o) {
    std::vector<double> g(o.grad.size());
    if (ai->requires_grad) {
      k().mul(o.grad.data(), bi->data.data(), g.data(), g.size());
      ai->accumulate_grad(g);
    }
    if (bi->requires_grad) {
      k().mul(o.grad.data(), ai->data.data(), g.data(), g.size());
      bi->accumulate_grad(g);
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  const bool track = tracking({&x});
  std::vector<double> out(x.size());
  k().scale(x.values().data(), factor, out.data(), out.size());
  ImplPtr xi = x.impl();
  return finish(x.shape(), std::move(out), track, "scale", [xi, factor](const Impl& o) {
    std::vector<double> g(o.grad.size());
    k().scale(o.grad.data(), factor, g.data(), g.size());
    xi->accumulate_grad(g);
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() == 0 || bias.rank() != 1 || bias.dim(0) != x.shape().back()) {
    throw DimensionError("add_bias: cannot add " + shape_str(bias.shape()) + " to " +
                         shape_str(x.shape()));
  }
  const std::size_t d = bias.dim(0), rows = x.size() / d;
  const bool track = tracking({&x, &bias});
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    k().add(x.values().data() + r * d, bias.values().data(), out.data() + r * d, d);
  }
  ImplPtr xi = x.impl(), bi = bias.impl();
  return finish(x.shape(), std::move(out), track, "add_bias", [xi, bi, rows, d](const Impl& o) {
    xi->accumulate_grad(o.grad);
    if (bi->requires_grad) {
      std::vector<double> gb(d, 0.0);
      for (std::size_t r = 0; r < rows; ++r) k().accumulate(o.grad.data() + r * d, gb.data(), d);
      bi->accumulate_grad(gb);
    }
  });
}

Tensor relu(const Tensor& x) {
  const bool track = tracking({&x});
  std::vector<double> out(x.size());
  k().relu(x.values().data(), out.data(), out.size());
  ImplPtr xi = x.impl();
  return finish(x.shape(), std::move(out), track, "relu", [xi](const Impl& o) {
    std::vector<double> g(o.grad.size(), 0.0);
    k().relu_backward(xi->data.data(), o.grad.data(), g.data(), g.size());
    xi->accumulate_grad(g);
  });
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  return unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(c * (v + a * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * a * v * v);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const std::size_t n = x.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const bool track = tracking({&x});
  const auto xs = x.values();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xs[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xs[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  ImplPtr xi = x.impl();
  return finish(x.shape(), std::move(out), track, "softmax",
                [xi, outer, inner, n](const Impl& o) {
                  std::vector<double> g(o.grad.size());
                  for (std::size_t a = 0; a < outer; ++a) {
                    for (std::size_t in = 0; in < inner; ++in) {
                      const std::size_t base = a * n * inner + in;
                      double dot = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        dot += o.grad[base + j * inner] * o.data[base + j * inner];
                      }
                      for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t idx = base + j * inner;
                        g[idx] = o.data[idx] * (o.grad[idx] - dot);
                      }
                    }
                  }
                  xi->accumulate_grad(g);
                });
}

Tensor masked_softmax(const Tensor& scores, std::span<const std::uint8_t> mask) {
  require_rank(scores, 2, "masked_softmax");
  const std::size_t lq = scores.dim(0), lk = scores.dim(1);
  if (mask.size() != lq * lk) {
    throw DimensionError("masked_softmax: mask holds " + std::to_string(mask.size()) +
                         " entries for scores " + shape_str(scores.shape()));
  }
  const bool track = tracking({&scores});
  const auto xs = scores.values();
  std::vector<double> out(scores.size(), 0.0);
  for (std::size_t r = 0; r < lq; ++r) {
    const std::size_t base = r * lk;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < lk; ++j) {
      if (mask[base + j]) {
        mx = std::max(mx, xs[base + j]);
        any = true;
      }
    }
    if (!any) {
      throw ContractError("masked_softmax: row " + std::to_string(r) + " has no attendable key");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < lk; ++j) {
      if (mask[base + j]) {
        out[base + j] = std::exp(xs[base + j] - mx);
        total += out[base + j];
      }
    }
    for (std::size_t j = 0; j < lk; ++j) out[base + j] /= total;
  }
  ImplPtr xi = scores.impl();
  return finish(scores.shape(), std::move(out), track, "masked_softmax",
                [xi, lq, lk](const Impl& o) {
                  std::vector<double> g(o.grad.size());
                  for (std::size_t r = 0; r < lq; ++r) {
                    const std::size_t base = r * lk;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < lk; ++j) dot += o.grad[base + j] * o.data[base + j];
                    for (std::size_t j = 0; j < lk; ++j) {
                      g[base + j] = o.data[base + j] * (o.grad[base + j] - dot);
                    }
                  }
                  xi->accumulate_grad(g);
                });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps) {
  if (x.rank() == 0) throw DimensionError("layernorm: scalar input");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || shift.shape() != Shape{d}) {
    throw DimensionError("layernorm: gain " + shape_str(gain.shape()) + " / shift " +
                         shape_str(shift.shape()) + " do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  const bool track = tracking({&x, &gain, &shift});
  const auto xs = x.values(), gs = gain.values(), bs = shift.values();
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * d;
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) total += row[j];
    const double mu = total / static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gs[j] + bs[j];
    }
  }
  ImplPtr xi = x.impl(), gi = gain.impl(), si = shift.impl();
  return finish(x.shape(), std::move(out), track, "layernorm",
                [xi, gi, si, xhat, rstd, rows, d](const Impl& o) {
                  std::vector<double> gx(xi->data.size()), gg(d, 0.0), gsh(d, 0.0);
                  std::vector<double> dh(d);
                  const double inv_d = 1.0 / static_cast<double>(d);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* go = o.grad.data() + r * d;
                    const double* h = xhat->data() + r * d;
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      dh[j] = go[j] * gi->data[j];
                      mean_dh += dh[j];
                      mean_dh_h += dh[j] * h[j];
                      gg[j] += go[j] * h[j];
                      gsh[j] += go[j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    for (std::size_t j = 0; j < d; ++j) {
                      gx[r * d + j] = (*rstd)[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                    }
                  }
                  xi->accumulate_grad(gx);
                  gi->accumulate_grad(gg);
                  si->accumulate_grad(gsh);
                });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding_lookup");
  if (ids.empty()) throw ContractError("embedding_lookup: empty id sequence");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
  }
  const bool track = tracking({&table});
  std::vector<double> out(ids.size() * d);
  const auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  ImplPtr ti = table.impl();
  auto saved = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return finish({ids.size(), d}, std::move(out), track, "embedding_lookup",
                [ti, saved, d](const Impl& o) {
                  std::vector<double> g(ti->data.size(), 0.0);
                  for (std::size_t i = 0; i < saved->size(); ++i) {
                    k().accumulate(o.grad.data() + i * d,
                                   g.data() + static_cast<std::size_t>((*saved)[i]) * d, d);
                  }
                  ti->accumulate_grad(g);
                });
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride) {
  require_rank(input, 3, "conv2d");
  if (kernels.rank() != 4 || kernels.dim(0) != 3 || kernels.dim(1) != 3 ||
      kernels.dim(2) != input.dim(2) || bias.shape() != Shape{kernels.dim(3)}) {
    throw DimensionError("conv2d: input " + shape_str(input.shape()) + ", kernels " +
                         shape_str(kernels.shape()) + ", bias " + shape_str(bias.shape()) +
                         " are incompatible");
  }
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
  const std::size_t cout = kernels.dim(3);
  const std::size_t oh = (h - 1) / stride + 1, ow = (w - 1) / stride + 1;
  const std::size_t patch = 9 * cin, npix = oh * ow;
  const bool track = tracking({&input, &kernels, &bias});

  // im2col: row p holds the zero-padded 3x3xcin neighbourhood of output pixel
  // p in (ky, kx, ci) order, matching the kernel layout.
  auto cols = std::make_shared<std::vector<double>>(npix * patch, 0.0);
  const auto xs = input.values();
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double* row = cols->data() + (oy * ow + ox) * patch;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
        if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
          if (x < 0 || x >= static_cast<std::ptrdiff_t>(w)) continue;
          std::copy_n(xs.data() + (static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * cin,
                      cin, row + (ky * 3 + kx) * cin);
        }
      }
    }
  }
  std::vector<double> out(npix * cout);
  k().matmul(cols->data(), kernels.values().data(), out.data(), npix, patch, cout);
  for (std::size_t p = 0; p < npix; ++p) {
    k().add(out.data() + p * cout, bias.values().data(), out.data() + p * cout, cout);
  }
  ImplPtr xi = input.impl(), ki = kernels.impl(), bi = bias.impl();
  return finish(
      {oh, ow, cout}, std::move(out), track, "conv2d",
      [xi, ki, bi, cols, h, w, cin, cout, oh, ow, stride, patch, npix](const Impl& o) {
        if (ki->requires_grad) {
          const auto ct = transposed(cols->data(), npix, patch);
          std::vector<double> gk(patch * cout);
          k().matmul(ct.data(), o.grad.data(), gk.data(), patch, npix, cout);
          ki->accumulate_grad(gk);
        }
        if (bi->requires_grad) {
          std::vector<double> gb(cout, 0.0);
          for (std::size_t p = 0; p < npix; ++p) k().accumulate(o.grad.data() + p * cout, gb.data(), cout);
          bi->accumulate_grad(gb);
        }
        if (xi->requires_grad) {
          const auto kt = transposed(ki->data.data(), patch, cout);
          std::vector<double> gcols(npix * patch);
          k().matmul(o.grad.data(), kt.data(), gcols.data(), npix, cout, patch);
          std::vector<double> gx(h * w * cin, 0.0);
          for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const double* row = gcols.data() + (oy * ow + ox) * patch;
              for (std::size_t ky = 0; ky < 3; ++ky) {
                const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
                if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                  const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
                  if (x < 0 || x >= static_cast<std::ptrdiff_t>(w)) continue;
                  k().accumulate(
                      row + (ky * 3 + kx) * cin,
                      gx.data() + (static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * cin,
                      cin);
                }
              }
            }
          }
          xi->accumulate_grad(gx);
        }
      });
}

Tensor maxpool2d(const Tensor& input) {
  require_rank(input, 3, "maxpool2d");
  const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
  if (h < 2 || w < 2) {
    throw DimensionError("maxpool2d: input " + shape_str(input.shape()) +
                         " is smaller than the 2x2 window");
  }
  const std::size_t oh = h / 2, ow = w / 2;
  const bool track = tracking({&input});
  const auto xs = input.values();
  std::vector<double> out(oh * ow * c);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        std::size_t best = ((2 * oy) * w + 2 * ox) * c + ch;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
            if (xs[idx] > xs[best]) best = idx;
          }
        }
        const std::size_t o = (oy * ow + ox) * c + ch;
        out[o] = xs[best];
        (*argmax)[o] = best;
      }
    }
  }
  ImplPtr xi = input.impl();
  return finish({oh, ow, c}, std::move(out), track, "maxpool2d", [xi, argmax](const Impl& o) {
    std::vector<double> g(xi->data.size(), 0.0);
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[(*argmax)[i]] += o.grad[i];
    xi->accumulate_grad(g);
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  const bool track = tracking({&x});
  std::vector<double> out(x.values().begin(), x.values().end());
  ImplPtr xi = x.impl();
  return finish(std::move(shape), std::move(out), track, "reshape",
                [xi](const Impl& o) { xi->accumulate_grad(o.grad); });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  const bool track = tracking({&x});
  ImplPtr xi = x.impl();
  return finish({c, r}, transposed(x.values().data(), r, c), track, "transpose",
                [xi, r, c](const Impl& o) { xi->accumulate_grad(transposed(o.grad.data(), c, r)); });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: " + shape_str(s) + " does not line up with " +
                           shape_str(first) + " along axis " + std::to_string(axis));
    }
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Shape shape = first;
  shape[axis] = total;

  bool track = false;
  std::vector<ImplPtr> impls;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    track = track || tracking({&p});
    impls.push_back(p.impl());
    widths.push_back(p.dim(axis) * inner);
  }
  const std::size_t row = total * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto v = parts[pi].values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data() + o * widths[pi], widths[pi], out.data() + o * row + offset);
    }
    offset += widths[pi];
  }
  return finish(std::move(shape), std::move(out), track, "concat",
                [impls, widths, outer, row](const Impl& o) {
                  std::size_t off = 0;
                  for (std::size_t pi = 0; pi < impls.size(); ++pi) {
                    if (impls[pi]->requires_grad) {
                      std::vector<double> g(outer * widths[pi]);
                      for (std::size_t a = 0; a < outer; ++a) {
                        std::copy_n(o.grad.data() + a * row + off, widths[pi],
                                    g.data() + a * widths[pi]);
                      }
                      impls[pi]->accumulate_grad(g);
                    }
                    off += widths[pi];
                  }
                });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || length == 0 || start + length > x.dim(axis)) {
    throw DimensionError("slice: [" + std::to_string(start) + ", +" + std::to_string(length) +
                         ") along axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t src_row = x.dim(axis) * inner, dst_row = length * inner, off = start * inner;
  Shape shape = x.shape();
  shape[axis] = length;
  const bool track = tracking({&x});
  std::vector<double> out(outer * dst_row);
  const auto v = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(v.data() + o * src_row + off, dst_row, out.data() + o * dst_row);
  }
  ImplPtr xi = x.impl();
  return finish(std::move(shape), std::move(out), track, "slice",
                [xi, outer, src_row, dst_row, off](const Impl& o) {
                  std::vector<double> g(xi->data.size(), 0.0);
                  for (std::size_t a = 0; a < outer; ++a) {
                    std::copy_n(o.grad.data() + a * dst_row, dst_row, g.data() + a * src_row + off);
                  }
                  xi->accumulate_grad(g);
                });
}

Tensor sum(const Tensor& x) {
  const bool track = tracking({&x});
  double total = 0.0;
  for (double v : x.values()) total += v;
  ImplPtr xi = x.impl();
  return finish({}, {total}, track, "sum", [xi](const Impl& o) {
    xi->accumulate_grad(std::vector<double>(xi->data.size(), o.grad[0]));
  });
}

Tensor mean(const Tensor& x) {
  const bool track = tracking({&x});
  double total = 0.0;
  for (double v : x.values()) total += v;
  const double n = static_cast<double>(x.size());
  ImplPtr xi = x.impl();
  return finish({}, {total / n}, track, "mean", [xi, n](const Impl& o) {
    xi->accumulate_grad(std::vector<double>(xi->data.size(), o.grad[0] / n));
  });
}

Tensor mean_rows(const Tensor& x) {
  require_rank(x, 2, "mean_rows");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  const bool track = tracking({&x});
  std::vector<double> out(d, 0.0);
  const auto v = x.values();
  for (std::size_t r = 0; r < rows; ++r) k().accumulate(v.data() + r * d, out.data(), d);
  const double n = static_cast<double>(rows);
  for (double& o : out) o /= n;
  ImplPtr xi = x.impl();
  return finish({d}, std::move(out), track, "mean_rows", [xi, rows, d, n](const Impl& o) {
    std::vector<double> g(rows * d);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] = o.grad[j] / n;
    }
    xi->accumulate_grad(g);
  });
}

Tensor nll_loss(const Tensor& logits, std::span<const int> targets, std::span<const double> weights) {
  require_rank(logits, 2, "nll_loss");
  const std::size_t n = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != n || weights.size() != n) {
    throw DimensionError("nll_loss: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(weights.size()) + " weights for logits " +
                         shape_str(logits.shape()));
  }
  const bool track = tracking({&logits});
  const auto xs = logits.values();
  auto probs = std::make_shared<std::vector<double>>(n * vocab);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("nll_loss: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    const double* row = xs.data() + i * vocab;
    double mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      const double e = std::exp(row[j] - mx);
      (*probs)[i * vocab + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < vocab; ++j) (*probs)[i * vocab + j] /= z;
    const double lse = mx + std::log(z);
    if (weights[i] != 0.0) total += weights[i] * (lse - row[t]);
  }
  ImplPtr xi = logits.impl();
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  auto wts = std::make_shared<std::vector<double>>(weights.begin(), weights.end());
  return finish({}, {total}, track, "nll_loss", [xi, probs, tgt, wts, n, vocab](const Impl& o) {
    std::vector<double> g(n * vocab, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double wi = (*wts)[i] * o.grad[0];
      if (wi == 0.0) continue;
      for (std::size_t j = 0; j < vocab; ++j) g[i * vocab + j] = wi * (*probs)[i * vocab + j];
      g[i * vocab + static_cast<std::size_t>((*tgt)[i])] -= wi;
    }
    xi->accumulate_grad(g);
  });
}

}  // namespace im2tex

#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numbers>
#include <vector>

#include "comalign/error.hpp"
#include "comalign/numerics/tape.hpp"
#include "comalign/numerics/tensor.hpp"

// Differentiable primitives recorded on a Tape. Each op computes its forward
// value eagerly and registers a closure that accumulates input gradients.
namespace comalign::num {

namespace detail {

inline void accumulate(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace detail

inline Var matmul(Tape& t, Var a, Var b) {
  Tensor out = kernel::matmul(t.value(a), t.value(b));
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(std::move(out), ng, [a, b](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    if (tp.needs_grad(a)) {
      Tensor bt = kernel::transpose(tp.value(b));
      detail::accumulate(tp.grad_buffer(a), kernel::matmul(g, bt));
    }
    if (tp.needs_grad(b)) detail::accumulate(tp.grad_buffer(b), kernel::matmul_tn(tp.value(a), g));
  });
}

// a(m x k) * b(n x k)^T
inline Var matmul_nt(Tape& t, Var a, Var b) {
  Tensor out = kernel::matmul_nt(t.value(a), t.value(b));
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(std::move(out), ng, [a, b](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    if (tp.needs_grad(a)) detail::accumulate(tp.grad_buffer(a), kernel::matmul(g, tp.value(b)));
    if (tp.needs_grad(b)) detail::accumulate(tp.grad_buffer(b), kernel::matmul_tn(g, tp.value(a)));
  });
}

inline Var add(Tape& t, Var a, Var b) {
  const Tensor& va = t.value(a);
  const Tensor& vb = t.value(b);
  if (va.size() != vb.size()) throw DimensionError("add: size mismatch");
  Tensor out = va;
  detail::accumulate(out, vb);
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(std::move(out), ng, [a, b](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    if (tp.needs_grad(a)) detail::accumulate(tp.grad_buffer(a), g);
    if (tp.needs_grad(b)) detail::accumulate(tp.grad_buffer(b), g);
  });
}

// Adds a length-c bias to every row of an r x c matrix.
inline Var add_row(Tape& t, Var a, Var bias) {
  const Tensor& va = t.value(a);
  const Tensor& vb = t.value(bias);
  if (vb.size() != va.cols()) throw DimensionError("add_row: bias length != columns");
  Tensor out = va;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += vb[c];
  }
  const bool ng = t.needs_grad(a) || t.needs_grad(bias);
  return t.push(std::move(out), ng, [a, bias](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    if (tp.needs_grad(a)) detail::accumulate(tp.grad_buffer(a), g);
    if (tp.needs_grad(bias)) {
      Tensor& gb = tp.grad_buffer(bias);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
      }
    }
  });
}

inline Var scale(Tape& t, Var a, double s) {
  Tensor out = t.value(a);
  for (double& v : out.storage()) v *= s;
  return t.push(std::move(out), t.needs_grad(a), [a, s](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    Tensor& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

inline Var sum(Tape& t, Var a) {
  double s = 0.0;
  for (double v : t.value(a).data()) s += v;
  return t.push(Tensor::vector({s}), t.needs_grad(a), [a](Tape& tp, std::size_t self) {
    const double g = tp.grad_buffer(self)[0];
    for (double& v : tp.grad_buffer(a).storage()) v += g;
  });
}

inline Var transpose(Tape& t, Var a) {
  return t.push(kernel::transpose(t.value(a)), t.needs_grad(a), [a](Tape& tp, std::size_t self) {
    detail::accumulate(tp.grad_buffer(a), kernel::transpose(tp.grad_buffer(self)));
  });
}

// Exact (erf) GELU.
inline Var gelu(Tape& t, Var a) {
  const Tensor& x = t.value(a);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
  return t.push(std::move(out), t.needs_grad(a), [a](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& x = tp.value(a);
    Tensor& ga = tp.grad_buffer(a);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
      ga[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

// Layer normalization over the last axis with affine gain and bias.
inline Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps) {
  const Tensor& vx = t.value(x);
  const std::size_t d = vx.cols();
  if (d == 0) throw DimensionError("layer_norm: empty last axis");
  if (t.value(gain).size() != d || t.value(bias).size() != d)
    throw DimensionError("layer_norm: gain/bias length != last axis");
  const std::size_t rows = vx.rows();
  auto xhat = std::make_shared<Tensor>(vx.shape());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  Tensor out(vx.shape());
  const Tensor& g = t.value(gain);
  const Tensor& b = t.value(bias);
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = vx.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double denom = var + eps;
    const double rs = denom > 0.0 ? 1.0 / std::sqrt(denom) : 0.0;
    (*rstd)[r] = rs;
    auto xh = xhat->row(r);
    auto o = out.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      xh[c] = (in[c] - mean) * rs;
      o[c] = xh[c] * g[c] + b[c];
    }
  }
  const bool ng = t.needs_grad(x) || t.needs_grad(gain) || t.needs_grad(bias);
  return t.push(std::move(out), ng, [x, gain, bias, xhat, rstd](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.grad_buffer(self);
    const Tensor& g = tp.value(gain);
    const std::size_t d = gy.cols();
    if (tp.needs_grad(gain) || tp.needs_grad(bias)) {
      Tensor& gg = tp.grad_buffer(gain);
      Tensor& gb = tp.grad_buffer(bias);
      for (std::size_t r = 0; r < gy.rows(); ++r) {
        auto dy = gy.row(r);
        auto xh = xhat->row(r);
        for (std::size_t c = 0; c < d; ++c) {
          gg[c] += dy[c] * xh[c];
          gb[c] += dy[c];
        }
      }
    }
    if (!tp.needs_grad(x)) return;
    Tensor& gx = tp.grad_buffer(x);
    std::vector<double> dxh(d);
    for (std::size_t r = 0; r < gy.rows(); ++r) {
      auto dy = gy.row(r);
      auto xh = xhat->row(r);
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        dxh[c] = dy[c] * g[c];
        m1 += dxh[c];
        m2 += dxh[c] * xh[c];
      }
      m1 /= static_cast<double>(d);
      m2 /= static_cast<double>(d);
      auto dx = gx.row(r);
      for (std::size_t c = 0; c < d; ++c) dx[c] += (*rstd)[r] * (dxh[c] - m1 - xh[c] * m2);
    }
  });
}

// Row softmax with an optional column mask shared by all rows.
inline Var softmax_rows(Tape& t, Var m, const Mask& mask = {}) {
  const Tensor& vm = t.value(m);
  if (!mask.empty() && mask.size() != vm.cols()) throw DimensionError("softmax_rows: mask length");
  Tensor out(vm.shape());
  for (std::size_t r = 0; r < vm.rows(); ++r) kernel::softmax_row(vm.row(r), out.row(r), mask);
  return t.push(std::move(out), t.needs_grad(m), [m](Tape& tp, std::size_t self) {
    const Tensor& y = tp.value_at(self);
    const Tensor& gy = tp.grad_buffer(self);
    Tensor& gm = tp.grad_buffer(m);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto dr = gy.row(r);
      const double s = dot(yr, dr);
      auto o = gm.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) o[c] += yr[c] * (dr[c] - s);
    }
  });
}

// Shape of a batch of equal-length token sequences stacked row-wise.
struct SequenceLayout {
  std::size_t records = 0;
  std::size_t length = 0;
};

// Multi-head scaled dot-product self-attention, block-diagonal over records.
// q, k, v are (records*length) x d. key_mask (records*length) excludes keys;
// masked keys are skipped outright so their payload can never leak in.
inline Var attention(Tape& t, Var q, Var k, Var v, SequenceLayout layout, std::size_t heads,
                     const Mask& key_mask) {
  const Tensor& vq = t.value(q);
  const Tensor& vk = t.value(k);
  const Tensor& vv = t.value(v);
  const std::size_t d = vq.cols();
  const std::size_t L = layout.length;
  const std::size_t total = layout.records * L;
  if (vq.rows() != total || vk.rows() != total || vv.rows() != total || vk.cols() != d ||
      vv.cols() != d) {
    throw DimensionError("attention: q/k/v shapes disagree with layout");
  }
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: dim not divisible by heads");
  if (key_mask.size() != total) throw DimensionError("attention: mask length");
  const std::size_t dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[(rec*heads + h)*L*L + i*L + j]
  auto probs = std::make_shared<std::vector<double>>(layout.records * heads * L * L, 0.0);
  Tensor out = Tensor::matrix(total, d);
  std::vector<double> scores(L);
  for (std::size_t rec = 0; rec < layout.records; ++rec) {
    const std::size_t base = rec * L;
    Mask m(key_mask.begin() + static_cast<std::ptrdiff_t>(base),
           key_mask.begin() + static_cast<std::ptrdiff_t>(base + L));
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      double* P = probs->data() + (rec * heads + h) * L * L;
      for (std::size_t i = 0; i < L; ++i) {
        const double* qi = vq.data().data() + (base + i) * d + off;
        for (std::size_t j = 0; j < L; ++j) {
          if (!m[j]) {
            scores[j] = 0.0;
            continue;
          }
          const double* kj = vk.data().data() + (base + j) * d + off;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv;
        }
        kernel::softmax_row(scores, std::span<double>(P + i * L, L), m);
        double* oi = out.data().data() + (base + i) * d + off;
        for (std::size_t j = 0; j < L; ++j) {
          if (!m[j]) continue;
          const double p = P[i * L + j];
          const double* vj = vv.data().data() + (base + j) * d + off;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }
  const bool ng = t.needs_grad(q) || t.needs_grad(k) || t.needs_grad(v);
  auto mask_copy = std::make_shared<Mask>(key_mask);
  return t.push(std::move(out), ng,
                [q, k, v, layout, heads, probs, mask_copy, inv](Tape& tp, std::size_t self) {
                  const Tensor& go = tp.grad_buffer(self);
                  const Tensor& vq = tp.value(q);
                  const Tensor& vk = tp.value(k);
                  const Tensor& vv = tp.value(v);
                  const std::size_t d = vq.cols();
                  const std::size_t L = layout.length;
                  const std::size_t dh = d / heads;
                  Tensor gq(vq.shape()), gk(vk.shape()), gv(vv.shape());
                  std::vector<double> dp(L);
                  for (std::size_t rec = 0; rec < layout.records; ++rec) {
                    const std::size_t base = rec * L;
                    const auto& m = *mask_copy;
                    for (std::size_t h = 0; h < heads; ++h) {
                      const std::size_t off = h * dh;
                      const double* P = probs->data() + (rec * heads + h) * L * L;
                      for (std::size_t i = 0; i < L; ++i) {
                        const double* doi = go.data().data() + (base + i) * d + off;
                        double weighted = 0.0;
                        for (std::size_t j = 0; j < L; ++j) {
                          if (!m[base + j]) {
                            dp[j] = 0.0;
                            continue;
                          }
                          const double p = P[i * L + j];
                          const double* vj = vv.data().data() + (base + j) * d + off;
                          double* gvj = gv.data().data() + (base + j) * d + off;
                          double s = 0.0;
                          for (std::size_t c = 0; c < dh; ++c) {
                            gvj[c] += p * doi[c];
                            s += doi[c] * vj[c];
                          }
                          dp[j] = s;
                          weighted += p * s;
                        }
                        const double* qi = vq.data().data() + (base + i) * d + off;
                        double* gqi = gq.data().data() + (base + i) * d + off;
                        for (std::size_t j = 0; j < L; ++j) {
                          if (!m[base + j]) continue;
                          const double ds = P[i * L + j] * (dp[j] - weighted) * inv;
                          const double* kj = vk.data().data() + (base + j) * d + off;
                          double* gkj = gk.data().data() + (base + j) * d + off;
                          for (std::size_t c = 0; c < dh; ++c) {
                            gqi[c] += ds * kj[c];
                            gkj[c] += ds * qi[c];
                          }
                        }
                      }
                    }
                  }
                  if (tp.needs_grad(q)) detail::accumulate(tp.grad_buffer(q), gq);
                  if (tp.needs_grad(k)) detail::accumulate(tp.grad_buffer(k), gk);
                  if (tp.needs_grad(v)) detail::accumulate(tp.grad_buffer(v), gv);
                });
}

// Unit-normalizes every live row; masked rows become exact zeros.
inline Var l2_normalize_rows(Tape& t, Var x, const Mask& mask) {
  const Tensor& vx = t.value(x);
  if (mask.size() != vx.rows()) throw DimensionError("l2_normalize_rows: mask length");
  Tensor out(vx.shape());
  auto norms = std::make_shared<std::vector<double>>(vx.rows(), 0.0);
  for (std::size_t r = 0; r < vx.rows(); ++r) {
    if (!mask[r]) continue;
    const double n = norm(vx.row(r));
    if (!(n > 0.0) || !std::isfinite(n)) throw NumericalError("l2_normalize_rows: degenerate row");
    (*norms)[r] = n;
    auto o = out.row(r);
    auto in = vx.row(r);
    for (std::size_t c = 0; c < o.size(); ++c) o[c] = in[c] / n;
  }
  return t.push(std::move(out), t.needs_grad(x), [x, norms](Tape& tp, std::size_t self) {
    const Tensor& y = tp.value_at(self);
    const Tensor& gy = tp.grad_buffer(self);
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const double n = (*norms)[r];
      if (n == 0.0) continue;
      auto yr = y.row(r);
      auto dr = gy.row(r);
      const double s = dot(yr, dr);
      auto o = gx.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) o[c] += (dr[c] - yr[c] * s) / n;
    }
  });
}

// Replaces masked rows with zeros (by assignment, so non-finite payloads vanish).
inline Var mask_rows(Tape& t, Var x, const Mask& mask) {
  const Tensor& vx = t.value(x);
  if (mask.size() != vx.rows()) throw DimensionError("mask_rows: mask length");
  Tensor out(vx.shape());
  for (std::size_t r = 0; r < vx.rows(); ++r) {
    if (!mask[r]) continue;
    auto o = out.row(r);
    auto in = vx.row(r);
    std::copy(in.begin(), in.end(), o.begin());
  }
  auto m = std::make_shared<Mask>(mask);
  return t.push(std::move(out), t.needs_grad(x), [x, m](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.grad_buffer(self);
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t r = 0; r < gy.rows(); ++r) {
      if (!(*m)[r]) continue;
      auto o = gx.row(r);
      auto in = gy.row(r);
      for (std::size_t c = 0; c < o.size(); ++c) o[c] += in[c];
    }
  });
}

// Gathers rows by index.
inline Var select_rows(Tape& t, Var x, std::vector<std::size_t> indices) {
  const Tensor& vx = t.value(x);
  Tensor out = Tensor::matrix(indices.size(), vx.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= vx.rows()) throw DimensionError("select_rows: index out of range");
    auto in = vx.row(indices[r]);
    std::copy(in.begin(), in.end(), out.row(r).begin());
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
  return t.push(std::move(out), t.needs_grad(x), [x, idx](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.grad_buffer(self);
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t r = 0; r < idx->size(); ++r) {
      auto o = gx.row((*idx)[r]);
      auto in = gy.row(r);
      for (std::size_t c = 0; c < o.size(); ++c) o[c] += in[c];
    }
  });
}

// Row r of the result is taken from `a` when pick_a[r], otherwise from `b`.
inline Var blend_rows(Tape& t, Var a, Var b, const Mask& pick_a) {
  const Tensor& va = t.value(a);
  const Tensor& vb = t.value(b);
  if (!same_shape(va, vb) || pick_a.size() != va.rows()) throw DimensionError("blend_rows: shapes");
  Tensor out(va.shape());
  for (std::size_t r = 0; r < va.rows(); ++r) {
    auto in = pick_a[r] ? va.row(r) : vb.row(r);
    std::copy(in.begin(), in.end(), out.row(r).begin());
  }
  auto m = std::make_shared<Mask>(pick_a);
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(std::move(out), ng, [a, b, m](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.grad_buffer(self);
    for (std::size_t r = 0; r < gy.rows(); ++r) {
      const Var src = (*m)[r] ? a : b;
      if (!tp.needs_grad(src)) continue;
      auto o = tp.grad_buffer(src).row(r);
      auto in = gy.row(r);
      for (std::size_t c = 0; c < o.size(); ++c) o[c] += in[c];
    }
  });
}

}  // namespace comalign::num

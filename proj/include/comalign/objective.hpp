#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "comalign/error.hpp"
#include "comalign/matching.hpp"
#include "comalign/numerics/tape.hpp"
#include "comalign/numerics/tensor.hpp"

namespace comalign::objective {

using matching::SimilarityBundle;
using num::Tape;
using num::Tensor;
using num::Var;

struct LossFlags {
  bool use_global = true;
  bool use_entity = true;
  bool use_relation = true;
  double temperature = 1.0;
};

inline void validate(const LossFlags& f) {
  if (!f.use_global && !f.use_entity && !f.use_relation)
    throw ConfigError("loss flags: at least one channel must be enabled");
  if (!(f.temperature > 0.0) || !std::isfinite(f.temperature))
    throw ConfigError("loss flags: temperature must be positive");
}

enum class Channel { entity = 0, relation = 1, global = 2 };
inline constexpr std::array<Channel, 3> kChannels{Channel::entity, Channel::relation, Channel::global};

inline bool enabled(const LossFlags& f, Channel c) {
  switch (c) {
    case Channel::entity: return f.use_entity;
    case Channel::relation: return f.use_relation;
    case Channel::global: return f.use_global;
  }
  return false;
}

inline const Tensor& i2t(const SimilarityBundle& b, Channel c) {
  return c == Channel::entity ? b.i2t_entity : c == Channel::relation ? b.i2t_relation : b.i2t_global;
}
inline const Tensor& t2i(const SimilarityBundle& b, Channel c) {
  return c == Channel::entity ? b.t2i_entity : c == Channel::relation ? b.t2i_relation : b.t2i_global;
}

// -log softmax(s / tau)[i]. Written as lse - s_i so a uniform row gives log B exactly.
inline double info_nce_row(std::span<const double> s, std::size_t i, double tau) {
  if (i >= s.size()) throw DimensionError("info_nce_row: diagonal index out of range");
  if (!(tau > 0.0)) throw ConfigError("info_nce_row: tau must be positive");
  double m = -std::numeric_limits<double>::infinity();
  for (double v : s) m = std::max(m, v / tau);
  double z = 0.0;
  for (double v : s) z += std::exp(v / tau - m);
  return std::log(z) + (m - s[i] / tau);
}

inline void check_square(const SimilarityBundle& b) {
  const std::size_t B = b.i2t_global.rows();
  for (const Tensor* t : {&b.i2t_entity, &b.t2i_entity, &b.i2t_relation, &b.t2i_relation,
                          &b.i2t_global, &b.t2i_global})
    if (t->rank() != 2 || t->rows() != B || t->cols() != B)
      throw DimensionError("similarity bundle must be six square B x B matrices");
  if (B == 0) throw DimensionError("similarity bundle is empty");
}

struct DirectionLosses {
  std::vector<double> i2t;  // L^{I2T}_i
  std::vector<double> t2i;  // L^{T2I}_i
};

// Per-channel mean row losses for one bundle.
struct LossBreakdown {
  double total = 0.0;
  std::array<double, 3> i2t{};  // indexed by Channel
  std::array<double, 3> t2i{};
};

inline DirectionLosses direction_losses(const SimilarityBundle& b, const LossFlags& f) {
  validate(f);
  check_square(b);
  const std::size_t B = b.batch();
  DirectionLosses out{std::vector<double>(B, 0.0), std::vector<double>(B, 0.0)};
  for (std::size_t i = 0; i < B; ++i) {
    for (Channel c : kChannels) {
      if (!enabled(f, c)) continue;
      out.i2t[i] += info_nce_row(i2t(b, c).row(i), i, f.temperature);
      out.t2i[i] += info_nce_row(t2i(b, c).row(i), i, f.temperature);
    }
  }
  return out;
}

inline double total_loss(const SimilarityBundle& b, const LossFlags& f) {
  const auto d = direction_losses(b, f);
  double s = 0.0;
  for (std::size_t i = 0; i < d.i2t.size(); ++i) s += d.i2t[i] + d.t2i[i];
  return s / (2.0 * static_cast<double>(d.i2t.size()));
}

inline LossBreakdown breakdown(const SimilarityBundle& b, const LossFlags& f) {
  validate(f);
  check_square(b);
  LossBreakdown out;
  const std::size_t B = b.batch();
  for (Channel c : kChannels) {
    if (!enabled(f, c)) continue;
    const auto k = static_cast<std::size_t>(c);
    for (std::size_t i = 0; i < B; ++i) {
      out.i2t[k] += info_nce_row(i2t(b, c).row(i), i, f.temperature);
      out.t2i[k] += info_nce_row(t2i(b, c).row(i), i, f.temperature);
    }
    out.i2t[k] /= static_cast<double>(B);
    out.t2i[k] /= static_cast<double>(B);
  }
  out.total = total_loss(b, f);
  return out;
}

namespace detail {

// d f_i / d s_ij = (softmax_j - [j == i]) / tau
inline void row_grad(std::span<const double> s, std::size_t i, double tau, double scale,
                     std::span<double> g) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : s) m = std::max(m, v / tau);
  double z = 0.0;
  for (double v : s) z += std::exp(v / tau - m);
  for (std::size_t j = 0; j < s.size(); ++j) {
    const double p = std::exp(s[j] / tau - m) / z;
    g[j] += scale * (p - (j == i ? 1.0 : 0.0)) / tau;
  }
}

}  // namespace detail

// Total loss as a scalar tape node over the six bundle matrices.
inline Var contrastive_loss(Tape& t, const matching::BundleVars& v, const LossFlags& f) {
  const SimilarityBundle b = matching::values(t, v);
  const double loss = total_loss(b, f);
  const std::array<Var, 6> inputs{v.i2t_entity, v.i2t_relation, v.i2t_global,
                                  v.t2i_entity, v.t2i_relation, v.t2i_global};
  bool ng = false;
  for (Var x : inputs) ng = ng || t.needs_grad(x);
  return t.push(Tensor::vector({loss}), ng, [inputs, f](Tape& tp, std::size_t self) {
    const double seed = tp.grad_buffer(self)[0];
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const Channel c = kChannels[k % 3];
      if (!enabled(f, c) || !tp.needs_grad(inputs[k])) continue;
      const Tensor& s = tp.value(inputs[k]);
      const std::size_t B = s.rows();
      Tensor& g = tp.grad_buffer(inputs[k]);
      const double scale = seed / (2.0 * static_cast<double>(B));
      for (std::size_t i = 0; i < B; ++i) detail::row_grad(s.row(i), i, f.temperature, scale, g.row(i));
    }
  });
}

}  // namespace comalign::objective

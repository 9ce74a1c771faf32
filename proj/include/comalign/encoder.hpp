#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "comalign/error.hpp"
#include "comalign/ingestion/records.hpp"
#include "comalign/numerics/ops.hpp"
#include "comalign/numerics/tape.hpp"
#include "comalign/numerics/tensor.hpp"

namespace comalign::encoder {

using num::Mask;
using num::Tape;
using num::Tensor;
using num::Var;

enum class Architecture {
  transformer,   // pre-norm self-attention + feed-forward blocks
  mlp_shared,    // feed-forward blocks only, one network for every token
  mlp_separate,  // feed-forward blocks only, separate networks for global vs components
};

inline std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::transformer: return "transformer";
    case Architecture::mlp_shared: return "mlp_shared";
    case Architecture::mlp_separate: return "mlp_separate";
  }
  return "transformer";
}

inline Architecture parse_architecture(const std::string& s) {
  if (s == "transformer") return Architecture::transformer;
  if (s == "mlp_shared") return Architecture::mlp_shared;
  if (s == "mlp_separate") return Architecture::mlp_separate;
  throw ConfigError("unknown architecture '" + s + "'");
}

struct EncoderConfig {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t ffn_ratio = 4;
  std::size_t layers = 2;
  std::size_t n_entities = 10;
  std::size_t m_relations = 10;
  bool positional_encoding = true;
  // Gain applied to input tokens before the positional encoding is added;
  // 0 selects `dim`. Unit-norm backbone vectors would otherwise be dwarfed by
  // the encoding and the freshly initialized residual branches.
  double embed_scale = 0.0;
  double ln_eps = 1e-5;
  Architecture architecture = Architecture::transformer;
  // Ablation: drop a component type from the sequence entirely.
  bool exclude_entities = false;
  bool exclude_relations = false;
  // Replace the head with L2 normalization of its inputs.
  bool bypass = false;

  std::size_t length() const { return 1 + n_entities + m_relations; }
  double effective_embed_scale() const {
    return embed_scale > 0.0 ? embed_scale : static_cast<double>(dim);
  }
};

inline void validate(const EncoderConfig& c) {
  if (c.dim == 0) throw ConfigError("encoder: dim must be positive");
  if (c.heads == 0 || c.dim % c.heads != 0) throw ConfigError("encoder: dim must be divisible by heads");
  if (c.positional_encoding && c.dim % 2 != 0)
    throw ConfigError("encoder: positional encoding needs an even dim");
  if (c.layers == 0 && !c.bypass) throw ConfigError("encoder: at least one layer");
  if (c.ffn_ratio == 0) throw ConfigError("encoder: ffn_ratio must be positive");
}

// Tokens in the order [global, e_1..e_N, r_1..r_M]; padded slots are zero
// with a false mask bit.
struct TokenSequence {
  Tensor tokens;
  Mask mask;
  std::size_t n_entities = 0;
  std::size_t m_relations = 0;

  std::size_t length() const { return 1 + n_entities + m_relations; }
  std::size_t dim() const { return tokens.cols(); }
  std::size_t entity_row(std::size_t e) const { return 1 + e; }
  std::size_t relation_row(std::size_t r) const { return 1 + n_entities + r; }
};

inline TokenSequence assemble_sequence(const ingestion::ComponentRecord& record, std::size_t dim,
                                       std::size_t n_entities, std::size_t m_relations) {
  ingestion::validate_record(record, {dim, n_entities, m_relations});
  TokenSequence seq;
  seq.n_entities = n_entities;
  seq.m_relations = m_relations;
  seq.tokens = Tensor::matrix(seq.length(), dim);
  seq.mask.assign(seq.length(), 0);
  auto put = [&](std::size_t row, const std::vector<double>& v) {
    std::copy(v.begin(), v.end(), seq.tokens.row(row).begin());
    seq.mask[row] = 1;
  };
  put(0, record.global);
  for (std::size_t e = 0; e < record.entities.size(); ++e) put(seq.entity_row(e), record.entities[e]);
  for (std::size_t r = 0; r < record.relations.size(); ++r)
    put(seq.relation_row(r), record.relations[r]);
  return seq;
}

inline TokenSequence assemble_sequence(const ingestion::ComponentRecord& record,
                                       const EncoderConfig& c) {
  return assemble_sequence(record, c.dim, c.n_entities, c.m_relations);
}

// Sinusoidal encoding: PE[p, 2i] = sin(p / 10000^(2i/dim)), PE[p, 2i+1] = cos(...).
inline Tensor positional_encoding(std::size_t length, std::size_t dim) {
  if (dim % 2 != 0) throw ConfigError("positional encoding needs an even dim");
  Tensor pe = Tensor::matrix(length, dim);
  for (std::size_t p = 0; p < length; ++p) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double angle =
          static_cast<double>(p) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(dim));
      pe(p, i) = std::sin(angle);
      pe(p, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

// Parameter tree, generic over the leaf type so the same structure holds
// tensors (EncoderParams) or their tape handles (EncoderVars).
template <typename T>
struct BasicLinear {
  T weight;  // in x out
  T bias;    // out
};

template <typename T>
struct BasicNorm {
  T gain;
  T bias;
};

template <typename T>
struct BasicFeedForward {
  BasicNorm<T> norm;
  BasicLinear<T> up;
  BasicLinear<T> down;
};

template <typename T>
struct BasicAttention {
  BasicNorm<T> norm;
  BasicLinear<T> query;
  T key;  // in x out; a key bias shifts every logit of a query row equally
  BasicLinear<T> value, output;
};

template <typename T>
struct BasicLayer {
  std::optional<BasicAttention<T>> attention;
  BasicFeedForward<T> ffn;
  std::optional<BasicFeedForward<T>> ffn_global;
};

template <typename T>
struct BasicEncoderParams {
  std::vector<BasicLayer<T>> layers;
  BasicNorm<T> final_norm;
};

using EncoderParams = BasicEncoderParams<Tensor>;
using EncoderVars = BasicEncoderParams<Var>;

namespace detail {

template <typename P, typename Fn>
void visit_norm(P& n, const std::string& prefix, Fn& fn) {
  fn(prefix + ".gain", n.gain);
  fn(prefix + ".bias", n.bias);
}

template <typename P, typename Fn>
void visit_linear(P& l, const std::string& prefix, Fn& fn) {
  fn(prefix + ".weight", l.weight);
  fn(prefix + ".bias", l.bias);
}

template <typename P, typename Fn>
void visit_ffn(P& f, const std::string& prefix, Fn& fn) {
  visit_norm(f.norm, prefix + ".norm", fn);
  visit_linear(f.up, prefix + ".up", fn);
  visit_linear(f.down, prefix + ".down", fn);
}

}  // namespace detail

// Calls fn(canonical_name, leaf) for every parameter in a fixed order.
template <typename Params, typename Fn>
void visit(Params& p, Fn&& fn) {
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    const std::string pre = "layers." + std::to_string(l);
    if (layer.attention) {
      auto& a = *layer.attention;
      detail::visit_norm(a.norm, pre + ".attn.norm", fn);
      detail::visit_linear(a.query, pre + ".attn.query", fn);
      fn(pre + ".attn.key.weight", a.key);
      detail::visit_linear(a.value, pre + ".attn.value", fn);
      detail::visit_linear(a.output, pre + ".attn.output", fn);
    }
    detail::visit_ffn(layer.ffn, pre + ".ffn", fn);
    if (layer.ffn_global) detail::visit_ffn(*layer.ffn_global, pre + ".ffn_global", fn);
  }
  detail::visit_norm(p.final_norm, "final_norm", fn);
}

// Mirror of a parameter tree with every leaf replaced by fn(leaf).
template <typename U, typename T, typename Fn>
BasicEncoderParams<U> map_params(const BasicEncoderParams<T>& p, Fn&& fn) {
  auto norm = [&](const BasicNorm<T>& n) { return BasicNorm<U>{fn(n.gain), fn(n.bias)}; };
  auto lin = [&](const BasicLinear<T>& l) { return BasicLinear<U>{fn(l.weight), fn(l.bias)}; };
  auto ffn = [&](const BasicFeedForward<T>& f) {
    return BasicFeedForward<U>{norm(f.norm), lin(f.up), lin(f.down)};
  };
  BasicEncoderParams<U> out;
  for (const auto& layer : p.layers) {
    BasicLayer<U> nl;
    if (layer.attention) {
      const auto& a = *layer.attention;
      nl.attention = BasicAttention<U>{norm(a.norm), lin(a.query), fn(a.key), lin(a.value),
                                       lin(a.output)};
    }
    nl.ffn = ffn(layer.ffn);
    if (layer.ffn_global) nl.ffn_global = ffn(*layer.ffn_global);
    out.layers.push_back(std::move(nl));
  }
  out.final_norm = norm(p.final_norm);
  return out;
}

inline std::size_t parameter_count(const EncoderParams& p) {
  std::size_t n = 0;
  visit(p, [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

// Xavier-uniform linear weights, zero biases, unit norm gains.
inline EncoderParams init_params(const EncoderConfig& c, std::uint64_t seed) {
  validate(c);
  const std::size_t d = c.dim;
  const std::size_t hidden = d * c.ffn_ratio;
  auto norm = [&] { return BasicNorm<Tensor>{Tensor({d}, 1.0), Tensor({d}, 0.0)}; };
  auto lin = [&](std::size_t in, std::size_t out) {
    return BasicLinear<Tensor>{Tensor::matrix(in, out), Tensor({out}, 0.0)};
  };
  auto ffn = [&] { return BasicFeedForward<Tensor>{norm(), lin(d, hidden), lin(hidden, d)}; };
  EncoderParams p;
  if (!c.bypass) {
    for (std::size_t l = 0; l < c.layers; ++l) {
      BasicLayer<Tensor> layer;
      if (c.architecture == Architecture::transformer)
        layer.attention =
            BasicAttention<Tensor>{norm(), lin(d, d), Tensor::matrix(d, d), lin(d, d), lin(d, d)};
      layer.ffn = ffn();
      if (c.architecture == Architecture::mlp_separate) layer.ffn_global = ffn();
      p.layers.push_back(std::move(layer));
    }
  }
  p.final_norm = norm();

  std::mt19937_64 rng(seed);
  visit(p, [&](const std::string& name, Tensor& t) {
    if (!name.ends_with(".weight")) return;
    const double fan_in = static_cast<double>(t.rows());
    const double fan_out = static_cast<double>(t.cols());
    std::uniform_real_distribution<double> u(-std::sqrt(6.0 / (fan_in + fan_out)),
                                             std::sqrt(6.0 / (fan_in + fan_out)));
    for (double& v : t.storage()) v = u(rng);
  });
  return p;
}

// A batch of sequences with identical layout, stacked row-wise.
struct SequenceBatch {
  Tensor tokens;  // (records*length) x dim
  Mask mask;
  num::SequenceLayout layout;
  std::size_t n_entities = 0;
  std::size_t m_relations = 0;

  std::size_t records() const { return layout.records; }
  std::size_t length() const { return layout.length; }
};

inline SequenceBatch stack(const std::vector<const TokenSequence*>& seqs) {
  if (seqs.empty()) throw DimensionError("stack: empty batch");
  SequenceBatch b;
  b.n_entities = seqs.front()->n_entities;
  b.m_relations = seqs.front()->m_relations;
  const std::size_t L = seqs.front()->length();
  const std::size_t d = seqs.front()->dim();
  b.layout = {seqs.size(), L};
  b.tokens = Tensor::matrix(seqs.size() * L, d);
  b.mask.reserve(seqs.size() * L);
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    const TokenSequence& s = *seqs[r];
    if (s.n_entities != b.n_entities || s.m_relations != b.m_relations || s.dim() != d ||
        s.tokens.rows() != L || s.mask.size() != L)
      throw DimensionError("stack: sequences have different layouts");
    std::copy(s.tokens.data().begin(), s.tokens.data().end(),
              b.tokens.data().begin() + static_cast<std::ptrdiff_t>(r * L * d));
    b.mask.insert(b.mask.end(), s.mask.begin(), s.mask.end());
  }
  return b;
}

inline SequenceBatch stack(const std::vector<TokenSequence>& seqs) {
  std::vector<const TokenSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  return stack(ptrs);
}

inline std::vector<TokenSequence> unstack(const Tensor& z, const SequenceBatch& b) {
  std::vector<TokenSequence> out;
  const std::size_t L = b.length();
  const std::size_t d = z.cols();
  for (std::size_t r = 0; r < b.records(); ++r) {
    TokenSequence s;
    s.n_entities = b.n_entities;
    s.m_relations = b.m_relations;
    s.tokens = Tensor::matrix(L, d);
    std::copy(z.data().begin() + static_cast<std::ptrdiff_t>(r * L * d),
              z.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * L * d), s.tokens.data().begin());
    s.mask.assign(b.mask.begin() + static_cast<std::ptrdiff_t>(r * L),
                  b.mask.begin() + static_cast<std::ptrdiff_t>((r + 1) * L));
    out.push_back(std::move(s));
  }
  return out;
}

// Mask after the exclusion ablations; the global slot always stays live.
inline Mask effective_mask(const SequenceBatch& b, const EncoderConfig& c) {
  Mask m = b.mask;
  const std::size_t L = b.length();
  for (std::size_t r = 0; r < b.records(); ++r) {
    m[r * L] = 1;
    for (std::size_t p = 1; p < L; ++p) {
      const bool is_entity = p <= b.n_entities;
      if ((is_entity && c.exclude_entities) || (!is_entity && c.exclude_relations)) m[r * L + p] = 0;
    }
  }
  return m;
}

namespace detail {

inline Var linear(Tape& t, Var x, const BasicLinear<Var>& l) {
  return num::add_row(t, num::matmul(t, x, l.weight), l.bias);
}

inline Var feed_forward(Tape& t, Var x, const BasicFeedForward<Var>& f, double eps) {
  Var h = num::layer_norm(t, x, f.norm.gain, f.norm.bias, eps);
  return linear(t, num::gelu(t, linear(t, h, f.up)), f.down);
}

}  // namespace detail

// Records the forward pass on the tape. Returns (records*length) x dim
// contextualized tokens, unit norm on live rows and zero on masked rows.
inline Var encode_on_tape(Tape& t, const EncoderConfig& c, const EncoderVars& p,
                          const SequenceBatch& batch) {
  if (batch.tokens.cols() != c.dim) throw DimensionError("encode: token dim != encoder dim");
  const Mask mask = effective_mask(batch, c);
  if (c.bypass) return num::l2_normalize_rows(t, t.constant(batch.tokens), mask);

  const std::size_t L = batch.length();
  const double gain = c.effective_embed_scale();
  Tensor x0 = Tensor::matrix(batch.tokens.rows(), c.dim);
  const Tensor pe = c.positional_encoding ? positional_encoding(L, c.dim) : Tensor::matrix(L, c.dim);
  for (std::size_t row = 0; row < x0.rows(); ++row) {
    auto out = x0.row(row);
    auto pos = pe.row(row % L);
    if (mask[row]) {
      auto in = batch.tokens.row(row);
      for (std::size_t k = 0; k < c.dim; ++k) out[k] = in[k] * gain + pos[k];
    } else {
      for (std::size_t k = 0; k < c.dim; ++k) out[k] = pos[k];
    }
  }
  if (!x0.all_finite()) throw NumericalError("encode: non-finite input tokens");

  Mask is_global(x0.rows(), 0);
  for (std::size_t r = 0; r < batch.records(); ++r) is_global[r * L] = 1;

  Var x = t.constant(std::move(x0));
  for (const auto& layer : p.layers) {
    if (layer.attention) {
      const auto& a = *layer.attention;
      Var h = num::layer_norm(t, x, a.norm.gain, a.norm.bias, c.ln_eps);
      Var q = detail::linear(t, h, a.query);
      Var k = num::matmul(t, h, a.key);
      Var v = detail::linear(t, h, a.value);
      Var att = num::attention(t, q, k, v, batch.layout, c.heads, mask);
      x = num::add(t, x, detail::linear(t, att, a.output));
    }
    Var f = detail::feed_forward(t, x, layer.ffn, c.ln_eps);
    if (layer.ffn_global) {
      Var fg = detail::feed_forward(t, x, *layer.ffn_global, c.ln_eps);
      f = num::blend_rows(t, fg, f, is_global);
    }
    x = num::add(t, x, f);
  }
  Var y = num::layer_norm(t, x, p.final_norm.gain, p.final_norm.bias, c.ln_eps);
  return num::l2_normalize_rows(t, y, mask);
}

inline EncoderVars bind(Tape& t, const EncoderParams& p, bool trainable) {
  return map_params<Var>(p, [&](const Tensor& x) { return trainable ? t.parameter(x) : t.constant(x); });
}

// Forward pass without gradients; output masks reflect the exclusion ablations.
inline std::vector<TokenSequence> encode_batch(const EncoderParams& params, const EncoderConfig& c,
                                               const std::vector<TokenSequence>& seqs) {
  if (seqs.empty()) return {};
  SequenceBatch batch = stack(seqs);
  Tape t;
  Var z = encode_on_tape(t, c, bind(t, params, false), batch);
  const Tensor& out = t.value(z);
  if (!out.all_finite()) throw NumericalError("encode: non-finite activations");
  batch.mask = effective_mask(batch, c);
  return unstack(out, batch);
}

inline TokenSequence encode(const EncoderParams& params, const EncoderConfig& c,
                            const TokenSequence& seq) {
  return encode_batch(params, c, {seq}).front();
}

}  // namespace comalign::encoder

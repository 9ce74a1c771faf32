#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "comalign/encoder.hpp"
#include "comalign/error.hpp"
#include "comalign/numerics/ops.hpp"
#include "comalign/numerics/tape.hpp"
#include "comalign/numerics/tensor.hpp"

namespace comalign::matching {

using encoder::TokenSequence;
using num::Mask;
using num::Tape;
using num::Tensor;
using num::Var;

namespace detail {

// Mean of per-row maxima summed in sorted order, so the result does not
// depend on the order of the query rows.
inline double ordered_mean(std::vector<double>& best) {
  if (best.empty()) return 0.0;
  std::sort(best.begin(), best.end());
  double total = 0.0;
  for (double b : best) total += b;
  return total / static_cast<double>(best.size());
}

}  // namespace detail

// Non-owning view of C component vectors (row-major C x dim) with a live mask.
struct ComponentView {
  std::span<const double> data;
  std::span<const std::uint8_t> mask;
  std::size_t dim = 0;

  std::size_t rows() const { return mask.size(); }
  std::span<const double> row(std::size_t i) const { return data.subspan(i * dim, dim); }
};

struct ComponentSet {
  Tensor vectors;  // C x dim
  Mask mask;

  ComponentView view() const { return {vectors.data(), mask, vectors.cols()}; }
};

inline ComponentView entities(const TokenSequence& s) {
  const std::size_t d = s.dim();
  return {s.tokens.data().subspan(d, s.n_entities * d),
          std::span<const std::uint8_t>(s.mask).subspan(1, s.n_entities), d};
}

inline ComponentView relations(const TokenSequence& s) {
  const std::size_t d = s.dim();
  return {s.tokens.data().subspan((1 + s.n_entities) * d, s.m_relations * d),
          std::span<const std::uint8_t>(s.mask).subspan(1 + s.n_entities, s.m_relations), d};
}

// Mean over live query rows of the best dot product against live gallery rows.
// Either side empty gives 0. Ties pick the lowest gallery index.
inline double fgm(ComponentView query, ComponentView gallery) {
  if (query.dim != gallery.dim && query.rows() && gallery.rows())
    throw DimensionError("fgm: dimension mismatch");
  bool gallery_live = false;
  for (std::size_t l = 0; l < gallery.rows(); ++l) gallery_live = gallery_live || gallery.mask[l];
  if (!gallery_live) return 0.0;
  std::vector<double> best_rows;
  for (std::size_t k = 0; k < query.rows(); ++k) {
    if (!query.mask[k]) continue;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < gallery.rows(); ++l) {
      if (!gallery.mask[l]) continue;
      const double s = num::dot(query.row(k), gallery.row(l));
      if (s > best) best = s;
    }
    best_rows.push_back(best);
  }
  return detail::ordered_mean(best_rows);
}

inline double fgm(const ComponentSet& query, const ComponentSet& gallery) {
  return fgm(query.view(), gallery.view());
}

struct PairSimilarities {
  double i2t_entity = 0.0;
  double t2i_entity = 0.0;
  double i2t_relation = 0.0;
  double t2i_relation = 0.0;
  double global = 0.0;  // shared by both directions
};

inline PairSimilarities pair_similarities(const TokenSequence& img, const TokenSequence& txt) {
  if (img.dim() != txt.dim())
    throw DimensionError("pair_similarities: dimension mismatch");
  PairSimilarities s;
  s.i2t_entity = fgm(entities(img), entities(txt));
  s.t2i_entity = fgm(entities(txt), entities(img));
  s.i2t_relation = fgm(relations(img), relations(txt));
  s.t2i_relation = fgm(relations(txt), relations(img));
  s.global = num::dot(img.tokens.row(0), txt.tokens.row(0));
  return s;
}

// The six B x B batch matrices; rows index the query side named first
// (images for I2T, texts for T2I).
struct SimilarityBundle {
  Tensor i2t_entity, t2i_entity;
  Tensor i2t_relation, t2i_relation;
  Tensor i2t_global, t2i_global;

  std::size_t batch() const { return i2t_global.rows(); }
};

namespace kernel {

// FGM for every (query record, gallery record) pair given the full component
// similarity matrix S ((nq*cq) x (ng*cg)). Optionally records the argmax used
// for every live query row (SIZE_MAX for dead rows or empty galleries).
inline Tensor fgm_pool(const Tensor& S, const Mask& qmask, const Mask& gmask, std::size_t nq,
                       std::size_t cq, std::size_t ng, std::size_t cg,
                       std::vector<std::size_t>* argmax = nullptr) {
  if (S.rows() != nq * cq || S.cols() != ng * cg || qmask.size() != nq * cq ||
      gmask.size() != ng * cg)
    throw DimensionError("fgm_pool: shape mismatch");
  Tensor out = Tensor::matrix(nq, ng);
  if (argmax) argmax->assign(nq * ng * cq, std::numeric_limits<std::size_t>::max());
  std::vector<double> best_rows;
  best_rows.reserve(cq);
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < ng; ++j) {
      bool gallery_live = false;
      for (std::size_t l = 0; l < cg; ++l) gallery_live = gallery_live || gmask[j * cg + l];
      if (!gallery_live) continue;
      best_rows.clear();
      for (std::size_t k = 0; k < cq; ++k) {
        if (!qmask[i * cq + k]) continue;
        const auto srow = S.row(i * cq + k);
        double best = -std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (std::size_t l = 0; l < cg; ++l) {
          if (!gmask[j * cg + l]) continue;
          const double s = srow[j * cg + l];
          if (s > best) {
            best = s;
            arg = j * cg + l;
          }
        }
        best_rows.push_back(best);
        if (argmax) (*argmax)[(i * ng + j) * cq + k] = arg;
      }
      out(i, j) = detail::ordered_mean(best_rows);
    }
  }
  return out;
}

struct Slots {
  std::vector<std::size_t> entity_rows, relation_rows, global_rows;
  Mask entity_mask, relation_mask;
};

inline Slots slots(const Mask& mask, std::size_t records, std::size_t n, std::size_t m) {
  Slots s;
  const std::size_t L = 1 + n + m;
  for (std::size_t r = 0; r < records; ++r) {
    s.global_rows.push_back(r * L);
    for (std::size_t e = 0; e < n; ++e) {
      s.entity_rows.push_back(r * L + 1 + e);
      s.entity_mask.push_back(mask[r * L + 1 + e]);
    }
    for (std::size_t q = 0; q < m; ++q) {
      s.relation_rows.push_back(r * L + 1 + n + q);
      s.relation_mask.push_back(mask[r * L + 1 + n + q]);
    }
  }
  return s;
}

inline Tensor gather(const Tensor& x, const std::vector<std::size_t>& rows) {
  Tensor out = Tensor::matrix(rows.size(), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(x.row(rows[r]).begin(), x.row(rows[r]).end(), out.row(r).begin());
  return out;
}

}  // namespace kernel

// Batched computation through one similarity matrix per channel; matches a
// loop of pair_similarities bit for bit.
inline SimilarityBundle batch_similarities(const std::vector<TokenSequence>& images,
                                           const std::vector<TokenSequence>& texts) {
  if (images.size() != texts.size())
    throw DimensionError("batch_similarities: batch sizes differ");
  if (images.empty()) throw DimensionError("batch_similarities: empty batch");
  const auto bi = encoder::stack(images);
  const auto bt = encoder::stack(texts);
  if (bi.n_entities != bt.n_entities || bi.m_relations != bt.m_relations ||
      bi.tokens.cols() != bt.tokens.cols())
    throw DimensionError("batch_similarities: image and text layouts differ");
  const std::size_t B = images.size(), n = bi.n_entities, m = bi.m_relations;
  const auto si = kernel::slots(bi.mask, B, n, m);
  const auto st = kernel::slots(bt.mask, B, n, m);
  const Tensor ei = kernel::gather(bi.tokens, si.entity_rows);
  const Tensor et = kernel::gather(bt.tokens, st.entity_rows);
  const Tensor ri = kernel::gather(bi.tokens, si.relation_rows);
  const Tensor rt = kernel::gather(bt.tokens, st.relation_rows);
  SimilarityBundle b;
  b.i2t_entity = kernel::fgm_pool(num::kernel::matmul_nt(ei, et), si.entity_mask, st.entity_mask, B, n, B, n);
  b.t2i_entity = kernel::fgm_pool(num::kernel::matmul_nt(et, ei), st.entity_mask, si.entity_mask, B, n, B, n);
  b.i2t_relation =
      kernel::fgm_pool(num::kernel::matmul_nt(ri, rt), si.relation_mask, st.relation_mask, B, m, B, m);
  b.t2i_relation =
      kernel::fgm_pool(num::kernel::matmul_nt(rt, ri), st.relation_mask, si.relation_mask, B, m, B, m);
  b.i2t_global = num::kernel::matmul_nt(kernel::gather(bi.tokens, si.global_rows),
                                        kernel::gather(bt.tokens, st.global_rows));
  b.t2i_global = num::kernel::transpose(b.i2t_global);
  return b;
}

// Batched FGM between query components xq ((nq*cq) x D) and gallery
// components xg ((ng*cg) x D) as one tape node. Only argmax entries carry
// gradient, so the backward pass is sparse.
inline Var fgm_similarity(Tape& t, Var xq, Var xg, const Mask& qmask, const Mask& gmask,
                          std::size_t nq, std::size_t cq, std::size_t ng, std::size_t cg) {
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  Tensor out = kernel::fgm_pool(num::kernel::matmul_nt(t.value(xq), t.value(xg)), qmask, gmask, nq,
                                cq, ng, cg, argmax.get());
  auto counts = std::make_shared<std::vector<double>>(nq, 0.0);
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t k = 0; k < cq; ++k) (*counts)[i] += qmask[i * cq + k] ? 1.0 : 0.0;
  const bool ng_q = t.needs_grad(xq), ng_g = t.needs_grad(xg);
  return t.push(std::move(out), ng_q || ng_g,
                [xq, xg, argmax, counts, nq, cq, ng, ng_q, ng_g](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_buffer(self);
                  const Tensor& q = tp.value(xq);
                  const Tensor& x = tp.value(xg);
                  Tensor* gq = ng_q ? &tp.grad_buffer(xq) : nullptr;
                  Tensor* gg = ng_g ? &tp.grad_buffer(xg) : nullptr;
                  const std::size_t d = q.cols();
                  for (std::size_t i = 0; i < nq; ++i) {
                    for (std::size_t j = 0; j < ng; ++j) {
                      const double share = g(i, j) / (*counts)[i];
                      if (share == 0.0) continue;
                      for (std::size_t k = 0; k < cq; ++k) {
                        const std::size_t arg = (*argmax)[(i * ng + j) * cq + k];
                        if (arg == std::numeric_limits<std::size_t>::max()) continue;
                        const std::size_t row = i * cq + k;
                        if (gq) {
                          auto dst = gq->row(row);
                          auto src = x.row(arg);
                          for (std::size_t c = 0; c < d; ++c) dst[c] += share * src[c];
                        }
                        if (gg) {
                          auto dst = gg->row(arg);
                          auto src = q.row(row);
                          for (std::size_t c = 0; c < d; ++c) dst[c] += share * src[c];
                        }
                      }
                    }
                  }
                });
}

struct BundleVars {
  Var i2t_entity, t2i_entity;
  Var i2t_relation, t2i_relation;
  Var i2t_global, t2i_global;
};

// Similarity bundle on the tape from encoded image and text batches.
inline BundleVars bundle_on_tape(Tape& t, Var z_img, const Mask& img_mask, Var z_txt,
                                 const Mask& txt_mask, std::size_t records, std::size_t n,
                                 std::size_t m) {
  const auto si = kernel::slots(img_mask, records, n, m);
  const auto st = kernel::slots(txt_mask, records, n, m);
  const std::size_t B = records;
  BundleVars b;
  Var ei = num::select_rows(t, z_img, si.entity_rows);
  Var et = num::select_rows(t, z_txt, st.entity_rows);
  b.i2t_entity = fgm_similarity(t, ei, et, si.entity_mask, st.entity_mask, B, n, B, n);
  b.t2i_entity = fgm_similarity(t, et, ei, st.entity_mask, si.entity_mask, B, n, B, n);
  Var ri = num::select_rows(t, z_img, si.relation_rows);
  Var rt = num::select_rows(t, z_txt, st.relation_rows);
  b.i2t_relation = fgm_similarity(t, ri, rt, si.relation_mask, st.relation_mask, B, m, B, m);
  b.t2i_relation = fgm_similarity(t, rt, ri, st.relation_mask, si.relation_mask, B, m, B, m);
  Var gi = num::select_rows(t, z_img, si.global_rows);
  Var gt = num::select_rows(t, z_txt, st.global_rows);
  b.i2t_global = num::matmul_nt(t, gi, gt);
  b.t2i_global = num::transpose(t, b.i2t_global);
  return b;
}

inline SimilarityBundle values(const Tape& t, const BundleVars& b) {
  return {t.value(b.i2t_entity), t.value(b.t2i_entity),   t.value(b.i2t_relation),
          t.value(b.t2i_relation), t.value(b.i2t_global), t.value(b.t2i_global)};
}

// Pairwise cosine similarities between two component sets (rows: query set).
inline Tensor similarity_matrix(ComponentView a, ComponentView b) {
  std::vector<std::size_t> ra, rb;
  for (std::size_t i = 0; i < a.rows(); ++i)
    if (a.mask[i]) ra.push_back(i);
  for (std::size_t j = 0; j < b.rows(); ++j)
    if (b.mask[j]) rb.push_back(j);
  if (ra.empty() || rb.empty()) throw DimensionError("similarity_matrix: empty component set");
  Tensor out = Tensor::matrix(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const auto x = a.row(ra[i]);
    const double nx = num::norm(x);
    for (std::size_t j = 0; j < rb.size(); ++j) {
      const auto y = b.row(rb[j]);
      out(i, j) = num::dot(x, y) / (nx * num::norm(y));
    }
  }
  return out;
}

inline std::string format_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// Row-major CSV, 9 significant digits.
inline void write_matrix_csv(std::ostream& out, const Tensor& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out << (j ? "," : "") << format_g9(m(i, j));
    out << '\n';
  }
}

inline void write_matrix_csv(const std::filesystem::path& path, const Tensor& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  write_matrix_csv(out, m);
}

}  // namespace comalign::matching

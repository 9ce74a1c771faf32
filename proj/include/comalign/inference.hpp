#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "comalign/encoder.hpp"
#include "comalign/error.hpp"
#include "comalign/ingestion/records.hpp"
#include "comalign/ingestion/synth.hpp"
#include "comalign/matching.hpp"
#include "comalign/objective.hpp"
#include "comalign/training.hpp"

namespace comalign::inference {

using ingestion::ComponentRecord;
using ingestion::Modality;
using matching::PairSimilarities;
using num::Tensor;
using training::Checkpoint;

struct Weights {
  double alpha1 = 0.1;
  double alpha2 = 0.033;
  double beta1 = 0.33;
};

inline Weights weights(const training::RunConfig& c) { return {c.alpha1, c.alpha2, c.beta1_inf}; }

struct ScoredPair {
  double base_global = 0.0;
  PairSimilarities fine;
  double i2t = 0.0;
  double t2i = 0.0;
};

// Which fine channels contribute; channels left out of the training loss are
// left out here too.
struct Channels {
  bool global = true;
  bool entity = true;
  bool relation = true;
};

inline Channels channels(const training::RunConfig& c) {
  return {c.use_global, c.use_entity, c.use_relation};
}

inline ScoredPair combine(double base, const PairSimilarities& s, const Weights& w,
                          const Channels& on = {}) {
  const double g = on.global ? s.global : 0.0;
  const double e = on.entity ? s.i2t_entity : 0.0;
  const double r = on.relation ? s.i2t_relation : 0.0;
  const double e2 = on.entity ? s.t2i_entity : 0.0;
  const double r2 = on.relation ? s.t2i_relation : 0.0;
  ScoredPair p;
  p.base_global = base;
  p.fine = s;
  p.i2t = base + w.alpha1 * (g + e + r) + w.alpha2 * (e2 + r2);
  p.t2i = base + w.beta1 * (g + e2 + r2);
  return p;
}

// Raw global, L2-normalized.
inline std::vector<double> unit_global(const ComponentRecord& r) {
  const double n = num::norm(r.global);
  if (!(n > 0.0)) throw NumericalError("record '" + r.id + "' has a zero global vector");
  std::vector<double> out(r.global);
  for (double& x : out) x /= n;
  return out;
}

struct EncodedRecord {
  encoder::TokenSequence z;
  std::vector<double> raw_unit_global;
};

inline const encoder::EncoderParams& head(const Checkpoint& ck, Modality m) {
  return m == Modality::image ? ck.image : ck.text;
}

inline void check_shape(const ComponentRecord& r, const training::RunConfig& c) {
  if (r.global.size() != c.dim) throw DimensionError("record '" + r.id + "' dim does not match checkpoint");
}

// Encodes records through the checkpoint head, chunked to bound tape size.
inline std::vector<EncodedRecord> encode_records(const std::vector<ComponentRecord>& records,
                                                 const Checkpoint& ck, Modality m,
                                                 std::size_t chunk = 256) {
  const auto cfg = training::encoder_config(ck.config, m);
  std::vector<EncodedRecord> out;
  out.reserve(records.size());
  for (std::size_t start = 0; start < records.size(); start += chunk) {
    const std::size_t end = std::min(records.size(), start + chunk);
    std::vector<encoder::TokenSequence> seqs;
    for (std::size_t k = start; k < end; ++k) {
      check_shape(records[k], ck.config);
      seqs.push_back(encoder::assemble_sequence(records[k], cfg));
    }
    auto z = encoder::encode_batch(head(ck, m), cfg, seqs);
    for (std::size_t k = start; k < end; ++k)
      out.push_back({std::move(z[k - start]), unit_global(records[k])});
  }
  return out;
}

inline ScoredPair score_encoded(const EncodedRecord& img, const EncodedRecord& txt,
                                const Weights& w, const Channels& on) {
  const double base = num::dot(img.raw_unit_global, txt.raw_unit_global);
  return combine(base, matching::pair_similarities(img.z, txt.z), w, on);
}

inline ScoredPair score_pair(const ComponentRecord& img, const ComponentRecord& txt,
                             const Checkpoint& ck, const Weights& w) {
  check_shape(img, ck.config);
  check_shape(txt, ck.config);
  const auto ei = encode_records({img}, ck, Modality::image);
  const auto et = encode_records({txt}, ck, Modality::text);
  return score_encoded(ei.front(), et.front(), w, channels(ck.config));
}

// Base and fine similarities for every (image, text) pair; weights are applied later.
struct PairTable {
  std::size_t images = 0;
  std::size_t texts = 0;
  std::vector<double> base;
  std::vector<PairSimilarities> fine;
  Channels on;

  ScoredPair at(std::size_t i, std::size_t j, const Weights& w) const {
    return combine(base[i * texts + j], fine[i * texts + j], w, on);
  }
};

inline PairTable pair_table(const std::vector<ComponentRecord>& images,
                            const std::vector<ComponentRecord>& texts, const Checkpoint& ck) {
  const auto ei = encode_records(images, ck, Modality::image);
  const auto et = encode_records(texts, ck, Modality::text);
  PairTable t;
  t.images = images.size();
  t.texts = texts.size();
  t.on = channels(ck.config);
  t.base.resize(t.images * t.texts);
  t.fine.resize(t.images * t.texts);
  for (std::size_t i = 0; i < t.images; ++i)
    for (std::size_t j = 0; j < t.texts; ++j) {
      t.base[i * t.texts + j] = num::dot(ei[i].raw_unit_global, et[j].raw_unit_global);
      t.fine[i * t.texts + j] = matching::pair_similarities(ei[i].z, et[j].z);
    }
  return t;
}

struct RetrievalReport {
  std::vector<std::size_t> ks;
  std::vector<double> i2t;  // R@K per entry of ks
  std::vector<double> t2i;
};

// 0-based rank of `target` among `scores`: higher first, ties by lower index.
inline std::size_t rank_of(const std::vector<double>& scores, std::size_t target) {
  std::size_t r = 0;
  const double s = scores[target];
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] > s || (scores[j] == s && j < target)) ++r;
  return r;
}

// Recall at each K given, per query, its full score row and ground-truth candidates.
inline std::vector<double> recall_at(const std::vector<std::vector<double>>& scores,
                                     const std::vector<std::vector<std::size_t>>& truth,
                                     const std::vector<std::size_t>& ks) {
  std::vector<double> out(ks.size(), 0.0);
  std::size_t queries = 0;
  for (std::size_t q = 0; q < scores.size(); ++q) {
    if (truth[q].empty()) continue;
    if (scores[q].empty()) throw DimensionError("eval_retrieval: empty gallery");
    ++queries;
    std::size_t best = scores[q].size();
    for (std::size_t t : truth[q]) best = std::min(best, rank_of(scores[q], t));
    for (std::size_t k = 0; k < ks.size(); ++k)
      if (best < ks[k]) out[k] += 1.0;
  }
  if (queries == 0) throw DimensionError("eval_retrieval: no queries with ground truth");
  for (double& v : out) v /= static_cast<double>(queries);
  return out;
}

inline RetrievalReport report(const PairTable& t,
                              const std::vector<std::pair<std::size_t, std::size_t>>& positives,
                              const Weights& w, const std::vector<std::size_t>& ks = {1, 5, 10}) {
  if (t.images == 0 || t.texts == 0) throw DimensionError("eval_retrieval: empty gallery");
  std::vector<std::vector<double>> s_i2t(t.images, std::vector<double>(t.texts));
  std::vector<std::vector<double>> s_t2i(t.texts, std::vector<double>(t.images));
  for (std::size_t i = 0; i < t.images; ++i)
    for (std::size_t j = 0; j < t.texts; ++j) {
      const auto p = t.at(i, j, w);
      s_i2t[i][j] = p.i2t;
      s_t2i[j][i] = p.t2i;
    }
  std::vector<std::vector<std::size_t>> gt_i2t(t.images), gt_t2i(t.texts);
  for (const auto& [i, j] : positives) {
    if (i >= t.images || j >= t.texts) throw DimensionError("eval_retrieval: positive out of range");
    gt_i2t[i].push_back(j);
    gt_t2i[j].push_back(i);
  }
  return {ks, recall_at(s_i2t, gt_i2t, ks), recall_at(s_t2i, gt_t2i, ks)};
}

inline RetrievalReport eval_retrieval(const ingestion::RetrievalSet& set, const Checkpoint& ck,
                                      const Weights& w, const std::vector<std::size_t>& ks = {1, 5, 10}) {
  return report(pair_table(set.images, set.texts, ck), set.positives, w, ks);
}

inline double mean_r1(const RetrievalReport& r) {
  for (std::size_t k = 0; k < r.ks.size(); ++k)
    if (r.ks[k] == 1) return 0.5 * (r.i2t[k] + r.t2i[k]);
  throw ConfigError("report has no R@1 entry");
}

inline void print_report(std::ostream& out, const RetrievalReport& r) {
  out << "direction";
  for (std::size_t k : r.ks) out << "  R@" << k;
  out << '\n';
  auto row = [&](const char* name, const std::vector<double>& v) {
    out << name;
    for (double x : v) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "  %.4f", x);
      out << buf;
    }
    out << '\n';
  };
  row("I2T      ", r.i2t);
  row("T2I      ", r.t2i);
}

inline void write_report_csv(std::ostream& out, const RetrievalReport& r) {
  out << "direction,k,recall\n";
  for (std::size_t k = 0; k < r.ks.size(); ++k)
    out << "I2T," << r.ks[k] << "," << matching::format_g9(r.i2t[k]) << '\n';
  for (std::size_t k = 0; k < r.ks.size(); ++k)
    out << "T2I," << r.ks[k] << "," << matching::format_g9(r.t2i[k]) << '\n';
}

struct BinaryReport {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<int> predictions;  // 0 = A, 1 = B, -1 = tie

  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

// Picks the caption with the higher I2T score; a tie counts as wrong.
inline int predict(double score_a, double score_b) {
  if (score_a > score_b) return 0;
  if (score_b > score_a) return 1;
  return -1;
}

inline BinaryReport eval_binary(const ingestion::BinarySet& set, const Checkpoint& ck, const Weights& w) {
  std::vector<ComponentRecord> imgs, caps;
  for (const auto& item : set.items) {
    imgs.push_back(item.image);
    caps.push_back(item.caption_a);
    caps.push_back(item.caption_b);
  }
  const auto ei = encode_records(imgs, ck, Modality::image);
  const auto et = encode_records(caps, ck, Modality::text);
  const auto on = channels(ck.config);
  BinaryReport r;
  r.total = set.items.size();
  for (std::size_t k = 0; k < set.items.size(); ++k) {
    const double a = score_encoded(ei[k], et[2 * k], w, on).i2t;
    const double b = score_encoded(ei[k], et[2 * k + 1], w, on).i2t;
    const int p = predict(a, b);
    r.predictions.push_back(p);
    if (p == set.items[k].correct) ++r.correct;
  }
  return r;
}

enum class DumpKind { entity, relation };

// Cosine similarities between the encoded visual and textual components of
// one pair; rows are image components, columns text components.
inline Tensor dump_similarity(const ComponentRecord& img, const ComponentRecord& txt,
                              const Checkpoint& ck, DumpKind kind) {
  const auto ei = encode_records({img}, ck, Modality::image);
  const auto et = encode_records({txt}, ck, Modality::text);
  const auto& zi = ei.front().z;
  const auto& zt = et.front().z;
  return kind == DumpKind::entity
             ? matching::similarity_matrix(matching::entities(zi), matching::entities(zt))
             : matching::similarity_matrix(matching::relations(zi), matching::relations(zt));
}

struct SweepRow {
  Weights w;
  double r1_i2t = 0.0;
  double r1_t2i = 0.0;
};

inline std::vector<SweepRow> sweep(const ingestion::RetrievalSet& set, const Checkpoint& ck,
                                   const std::vector<double>& alpha1, const std::vector<double>& alpha2,
                                   const std::vector<double>& beta1) {
  const PairTable t = pair_table(set.images, set.texts, ck);
  std::vector<SweepRow> rows;
  for (double a1 : alpha1)
    for (double a2 : alpha2)
      for (double b1 : beta1) {
        const Weights w{a1, a2, b1};
        const auto r = report(t, set.positives, w, {1});
        rows.push_back({w, r.i2t[0], r.t2i[0]});
      }
  return rows;
}

inline void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  using matching::format_g9;
  out << "alpha1,alpha2,beta1,R1_I2T,R1_T2I\n";
  for (const auto& r : rows)
    out << format_g9(r.w.alpha1) << ',' << format_g9(r.w.alpha2) << ',' << format_g9(r.w.beta1) << ','
        << format_g9(r.r1_i2t) << ',' << format_g9(r.r1_t2i) << '\n';
}

}  // namespace comalign::inference

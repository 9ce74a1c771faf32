#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "comalign/error.hpp"
#include "comalign/ingestion/base64.hpp"
#include "comalign/ingestion/records.hpp"

// Synthetic stand-ins for frozen-backbone embeddings. Every component slot of
// a pair draws a latent unit vector shared by the image and the caption; each
// side observes it through independent isotropic noise whose expected norm is
// the noise scale. All stored values are rounded to binary32 so in-memory data
// equals what the record file holds.
namespace comalign::ingestion {

struct SynthOptions {
  std::size_t count = 0;
  std::size_t dim = 32;
  std::size_t n_entities = 10;
  std::size_t m_relations = 10;
  double noise_sigma = 0.1;
  // Additional noise on the global vectors only.
  double global_noise = 0.0;
  // Consecutive pairs form confusion groups of this size whose raw globals are
  // built from one shared latent, so global-only retrieval cannot separate
  // members of a group.
  std::size_t group_size = 1;
  std::uint64_t seed = 0;
};

namespace detail {

class LatentSampler {
 public:
  LatentSampler(std::size_t dim, std::uint64_t seed) : dim_(dim), rng_(seed) {}

  std::vector<double> unit() {
    std::vector<double> v(dim_);
    for (double& x : v) x = normal_(rng_);
    normalize(v);
    return v;
  }

  // normalize(latent + sigma/sqrt(D) * N(0, I)); returns the noise drawn too.
  std::vector<double> observe(const std::vector<double>& latent, double sigma,
                              std::vector<double>* noise_out = nullptr) {
    std::vector<double> noise(dim_);
    const double s = sigma / std::sqrt(static_cast<double>(dim_));
    for (double& x : noise) x = s * normal_(rng_);
    if (noise_out) *noise_out = noise;
    return apply(latent, noise);
  }

  static std::vector<double> apply(const std::vector<double>& latent,
                                   const std::vector<double>& noise) {
    std::vector<double> v(latent.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = latent[i] + noise[i];
    normalize(v);
    for (double& x : v) x = round_to_f32(x);
    return v;
  }

  static void normalize(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n == 0.0) throw NumericalError("synth: zero-norm vector");
    for (double& x : v) x /= n;
  }

  static std::vector<double> mean_direction(const std::vector<std::vector<double>>& vs) {
    std::vector<double> m(vs.front().size(), 0.0);
    for (const auto& v : vs)
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += v[i];
    normalize(m);
    return m;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), rng_);
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::size_t dim_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

inline std::string make_id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%06zu", prefix, i);
  return buf;
}

inline void check_options(const SynthOptions& o) {
  if (o.dim < 2) throw ConfigError("synth: dim must be at least 2");
  if (!(o.noise_sigma >= 0.0) || !(o.global_noise >= 0.0))
    throw ConfigError("synth: noise scales must be non-negative");
  if (o.group_size < 1) throw ConfigError("synth: group size must be at least 1");
}

}  // namespace detail

inline PairedDataset synth_pairs(const SynthOptions& o) {
  detail::check_options(o);
  detail::LatentSampler rng(o.dim, o.seed);
  PairedDataset ds;
  ds.shape = {o.dim, o.n_entities, o.m_relations};

  struct Latents {
    std::vector<std::vector<double>> entities, relations;
    std::vector<double> global;
  };
  std::vector<Latents> latents(o.count);
  for (auto& l : latents) {
    for (std::size_t k = 0; k < o.n_entities; ++k) l.entities.push_back(rng.unit());
    for (std::size_t k = 0; k < o.m_relations; ++k) l.relations.push_back(rng.unit());
    std::vector<std::vector<double>> all = l.entities;
    all.insert(all.end(), l.relations.begin(), l.relations.end());
    l.global = all.empty() ? rng.unit() : detail::LatentSampler::mean_direction(all);
  }

  const double global_sigma = std::hypot(o.noise_sigma, o.global_noise);
  for (std::size_t i = 0; i < o.count; ++i) {
    const Latents& l = latents[i];
    const std::size_t g0 = i / o.group_size * o.group_size;
    const std::size_t g1 = std::min(o.count, g0 + o.group_size);
    std::vector<std::vector<double>> members;
    for (std::size_t g = g0; g < g1; ++g) members.push_back(latents[g].global);
    const auto raw_global = detail::LatentSampler::mean_direction(members);

    ComponentRecord img{detail::make_id("img", i), Modality::image, {}, {}, {}, {}};
    ComponentRecord txt{detail::make_id("txt", i), Modality::text, {}, {}, {}, {}};
    img.global = rng.observe(raw_global, global_sigma);
    txt.global = rng.observe(raw_global, global_sigma);
    for (const auto& e : l.entities) img.entities.push_back(rng.observe(e, o.noise_sigma));
    for (const auto& e : l.relations) img.relations.push_back(rng.observe(e, o.noise_sigma));
    for (const auto& e : l.entities) txt.entities.push_back(rng.observe(e, o.noise_sigma));
    for (const auto& e : l.relations) txt.relations.push_back(rng.observe(e, o.noise_sigma));
    // Caption components come in text order, unrelated to the detector's slot order.
    rng.shuffle(txt.entities);
    rng.shuffle(txt.relations);
    ds.pairs.emplace_back(std::move(img), std::move(txt));
  }
  return ds;
}

// Image paired with a correct and a perturbed caption.
struct BinaryItem {
  ComponentRecord image;
  ComponentRecord caption_a;
  ComponentRecord caption_b;
  int correct = 0;  // 0 = caption_a, 1 = caption_b
};

struct BinarySet {
  DatasetShape shape;
  std::vector<BinaryItem> items;
};

// Attribute-binding triples: each entity latent is normalize(object + attribute).
// The perturbed caption swaps the attributes of its first two entities and is
// otherwise a copy of the correct caption, including identical noise draws and
// the global vector (a bag-of-components global cannot see the swap).
inline BinarySet synth_attribute_triples(const SynthOptions& o) {
  detail::check_options(o);
  if (o.n_entities < 2) throw ConfigError("synth triples: need at least 2 entity slots");
  detail::LatentSampler rng(o.dim, o.seed);
  BinarySet set;
  set.shape = {o.dim, o.n_entities, o.m_relations};
  auto combine = [](const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
    detail::LatentSampler::normalize(v);
    return v;
  };
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < o.count; ++i) {
    std::vector<std::vector<double>> objects, attributes, entities, relations;
    for (std::size_t k = 0; k < o.n_entities; ++k) {
      objects.push_back(rng.unit());
      attributes.push_back(rng.unit());
      entities.push_back(combine(objects[k], attributes[k]));
    }
    for (std::size_t k = 0; k < o.m_relations; ++k) relations.push_back(rng.unit());
    std::vector<std::vector<double>> all = entities;
    all.insert(all.end(), relations.begin(), relations.end());
    const auto global = detail::LatentSampler::mean_direction(all);

    BinaryItem item;
    item.image = {detail::make_id("img", i), Modality::image, {}, {}, {}, {}};
    ComponentRecord good{detail::make_id("cap", 2 * i), Modality::text, {}, {}, {}, {}};
    ComponentRecord bad{detail::make_id("cap", 2 * i + 1), Modality::text, {}, {}, {}, {}};
    const double global_sigma = std::hypot(o.noise_sigma, o.global_noise);
    item.image.global = rng.observe(global, global_sigma);
    for (const auto& e : entities) item.image.entities.push_back(rng.observe(e, o.noise_sigma));
    for (const auto& e : relations) item.image.relations.push_back(rng.observe(e, o.noise_sigma));

    good.global = rng.observe(global, global_sigma);
    bad.global = good.global;
    std::vector<std::size_t> order(o.n_entities);
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    rng.shuffle(order);
    const auto swapped0 = combine(objects[0], attributes[1]);
    const auto swapped1 = combine(objects[1], attributes[0]);
    for (std::size_t k : order) {
      std::vector<double> noise;
      good.entities.push_back(rng.observe(entities[k], o.noise_sigma, &noise));
      if (k == 0) bad.entities.push_back(detail::LatentSampler::apply(swapped0, noise));
      else if (k == 1) bad.entities.push_back(detail::LatentSampler::apply(swapped1, noise));
      else bad.entities.push_back(good.entities.back());
    }
    for (const auto& e : relations) good.relations.push_back(rng.observe(e, o.noise_sigma));
    rng.shuffle(good.relations);
    bad.relations = good.relations;

    item.correct = coin(rng.engine()) ? 1 : 0;
    if (item.correct == 0) {
      item.caption_a = std::move(good);
      item.caption_b = std::move(bad);
    } else {
      item.caption_a = std::move(bad);
      item.caption_b = std::move(good);
    }
    set.items.push_back(std::move(item));
  }
  return set;
}

// Triples file: {"image_id","caption_a","caption_b","correct":"A"|"B"} per line,
// resolving ids against a record file.
inline void write_binary_set(const BinarySet& set, const std::filesystem::path& dir) {
  RecordFile file;
  file.shape = set.shape;
  for (const auto& it : set.items) file.records.push_back(it.image);
  for (const auto& it : set.items) {
    file.records.push_back(it.caption_a);
    file.records.push_back(it.caption_b);
  }
  write_record_file(dir / kRecordsFile, file);
  auto out = detail::open_out(dir / kTriplesFile);
  for (const auto& it : set.items) {
    out << nlohmann::json{{"image_id", it.image.id},
                          {"caption_a", it.caption_a.id},
                          {"caption_b", it.caption_b.id},
                          {"correct", it.correct == 0 ? "A" : "B"}}
               .dump()
        << '\n';
  }
}

inline BinarySet read_binary_set(const std::filesystem::path& dir) {
  const RecordFile file = read_record_file(dir / kRecordsFile);
  std::map<std::string, const ComponentRecord*> by_id;
  for (const auto& r : file.records) by_id[r.id] = &r;
  auto find = [&](const std::string& id, Modality m) -> const ComponentRecord& {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw FormatError("triples reference unknown record '" + id + "'");
    if (it->second->modality != m) throw FormatError("record '" + id + "' has the wrong modality");
    return *it->second;
  };
  BinarySet set;
  set.shape = file.shape;
  detail::for_each_line(dir / kTriplesFile, [&](const nlohmann::json& j, std::size_t) {
    BinaryItem it;
    it.image = find(j.at("image_id").get<std::string>(), Modality::image);
    it.caption_a = find(j.at("caption_a").get<std::string>(), Modality::text);
    it.caption_b = find(j.at("caption_b").get<std::string>(), Modality::text);
    const auto c = j.at("correct").get<std::string>();
    if (c != "A" && c != "B") throw FormatError("triples: correct must be \"A\" or \"B\"");
    it.correct = c == "A" ? 0 : 1;
    set.items.push_back(std::move(it));
  });
  return set;
}

}  // namespace comalign::ingestion

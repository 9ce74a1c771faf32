#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "comalign/components.hpp"
#include "comalign/error.hpp"
#include "comalign/ingestion/base64.hpp"
#include "comalign/numerics/tensor.hpp"

namespace comalign::ingestion {

enum class Modality { image, text };

inline std::string to_string(Modality m) { return m == Modality::image ? "image" : "text"; }

inline Modality parse_modality(const std::string& s) {
  if (s == "image") return Modality::image;
  if (s == "text") return Modality::text;
  throw FormatError("unknown modality tag '" + s + "'");
}

// One image or caption as produced by the frozen backbone: a global vector and
// the real (unpadded) entity and relation vectors.
struct ComponentRecord {
  std::string id;
  Modality modality = Modality::image;
  std::vector<double> global;
  std::vector<std::vector<double>> entities;
  std::vector<std::vector<double>> relations;
  std::vector<components::DetectionBox> boxes;  // image records only

  num::Mask entity_mask(std::size_t slots) const { return prefix_mask(entities.size(), slots); }
  num::Mask relation_mask(std::size_t slots) const { return prefix_mask(relations.size(), slots); }

  friend bool operator==(const ComponentRecord&, const ComponentRecord&) = default;

 private:
  static num::Mask prefix_mask(std::size_t real, std::size_t slots) {
    num::Mask m(slots, 0);
    for (std::size_t i = 0; i < std::min(real, slots); ++i) m[i] = 1;
    return m;
  }
};

struct DatasetShape {
  std::size_t dim = 0;
  std::size_t n_entities = 0;
  std::size_t m_relations = 0;
  friend bool operator==(const DatasetShape&, const DatasetShape&) = default;
};

// Index-aligned positive pairs: pairs[i].first matches pairs[i].second.
struct PairedDataset {
  DatasetShape shape;
  std::vector<std::pair<ComponentRecord, ComponentRecord>> pairs;

  std::size_t size() const { return pairs.size(); }
};

struct RecordFile {
  DatasetShape shape;
  std::vector<ComponentRecord> records;
};

inline void validate_record(const ComponentRecord& r, const DatasetShape& s) {
  auto check_dim = [&](const std::vector<double>& v, const char* what) {
    if (v.size() != s.dim)
      throw FormatError("record '" + r.id + "': " + what + " has dimension " +
                        std::to_string(v.size()) + ", expected " + std::to_string(s.dim));
  };
  check_dim(r.global, "global");
  if (r.entities.size() > s.n_entities)
    throw FormatError("record '" + r.id + "': " + std::to_string(r.entities.size()) +
                      " entities exceed the limit of " + std::to_string(s.n_entities));
  if (r.relations.size() > s.m_relations)
    throw FormatError("record '" + r.id + "': " + std::to_string(r.relations.size()) +
                      " relations exceed the limit of " + std::to_string(s.m_relations));
  for (const auto& e : r.entities) check_dim(e, "entity");
  for (const auto& e : r.relations) check_dim(e, "relation");
  if (r.modality == Modality::text && !r.boxes.empty())
    throw FormatError("record '" + r.id + "': boxes on a text record");
  for (const auto& b : r.boxes) components::validate(b);
}

namespace detail {

inline nlohmann::json record_to_json(const ComponentRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["modality"] = to_string(r.modality);
  j["global"] = encode_f32le(r.global);
  j["entities"] = nlohmann::json::array();
  for (const auto& e : r.entities) j["entities"].push_back(encode_f32le(e));
  j["relations"] = nlohmann::json::array();
  for (const auto& e : r.relations) j["relations"].push_back(encode_f32le(e));
  if (!r.boxes.empty()) {
    j["boxes"] = nlohmann::json::array();
    for (const auto& b : r.boxes) j["boxes"].push_back({b.x1, b.y1, b.x2, b.y2, b.confidence});
  }
  return j;
}

inline ComponentRecord record_from_json(const nlohmann::json& j) {
  ComponentRecord r;
  r.id = j.at("id").get<std::string>();
  r.modality = parse_modality(j.at("modality").get<std::string>());
  r.global = decode_f32le(j.at("global").get<std::string>());
  for (const auto& e : j.at("entities")) r.entities.push_back(decode_f32le(e.get<std::string>()));
  for (const auto& e : j.at("relations")) r.relations.push_back(decode_f32le(e.get<std::string>()));
  if (j.contains("boxes")) {
    for (const auto& b : j.at("boxes")) {
      if (b.size() != 5) throw FormatError("record '" + r.id + "': box needs 5 numbers");
      r.boxes.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                         b[3].get<double>(), b[4].get<double>(), {}});
    }
  }
  return r;
}

template <typename Fn>
void for_each_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    try {
      fn(j, lineno);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

}  // namespace detail

inline void write_record_file(const std::filesystem::path& path, const RecordFile& file) {
  auto out = detail::open_out(path);
  nlohmann::json header = {{"dim", file.shape.dim},
                           {"n_entities", file.shape.n_entities},
                           {"m_relations", file.shape.m_relations},
                           {"version", 1}};
  out << header.dump() << '\n';
  for (const auto& r : file.records) {
    validate_record(r, file.shape);
    out << detail::record_to_json(r).dump() << '\n';
  }
}

inline RecordFile read_record_file(const std::filesystem::path& path) {
  RecordFile file;
  bool have_header = false;
  detail::for_each_line(path, [&](const nlohmann::json& j, std::size_t) {
    if (!have_header) {
      if (j.value("version", 0) != 1) throw FormatError("unsupported record file version");
      file.shape = {j.at("dim").get<std::size_t>(), j.at("n_entities").get<std::size_t>(),
                    j.at("m_relations").get<std::size_t>()};
      have_header = true;
      return;
    }
    ComponentRecord r = detail::record_from_json(j);
    validate_record(r, file.shape);
    file.records.push_back(std::move(r));
  });
  if (!have_header) throw FormatError(path.string() + ": missing header line");
  return file;
}

using IdPair = std::pair<std::string, std::string>;

inline void write_pairs(const std::filesystem::path& path, const std::vector<IdPair>& pairs) {
  auto out = detail::open_out(path);
  for (const auto& [img, txt] : pairs)
    out << nlohmann::json{{"image_id", img}, {"text_id", txt}}.dump() << '\n';
}

inline std::vector<IdPair> read_pairs(const std::filesystem::path& path) {
  std::vector<IdPair> pairs;
  detail::for_each_line(path, [&](const nlohmann::json& j, std::size_t) {
    pairs.emplace_back(j.at("image_id").get<std::string>(), j.at("text_id").get<std::string>());
  });
  return pairs;
}

// Images and texts kept separately, with every ground-truth link. Supports
// several captions per image.
struct RetrievalSet {
  DatasetShape shape;
  std::vector<ComponentRecord> images;
  std::vector<ComponentRecord> texts;
  std::vector<std::pair<std::size_t, std::size_t>> positives;  // (image index, text index)
};

inline RetrievalSet link_records(const RecordFile& file, const std::vector<IdPair>& pairs) {
  RetrievalSet set;
  set.shape = file.shape;
  std::map<std::string, std::size_t> image_index, text_index;
  for (const auto& r : file.records) {
    auto& index = r.modality == Modality::image ? image_index : text_index;
    auto& bucket = r.modality == Modality::image ? set.images : set.texts;
    if (!index.emplace(r.id, bucket.size()).second)
      throw FormatError("duplicate record id '" + r.id + "'");
    bucket.push_back(r);
  }
  for (const auto& [img, txt] : pairs) {
    auto i = image_index.find(img);
    auto t = text_index.find(txt);
    if (i == image_index.end()) throw FormatError("pairing references unknown image '" + img + "'");
    if (t == text_index.end()) throw FormatError("pairing references unknown text '" + txt + "'");
    set.positives.emplace_back(i->second, t->second);
  }
  return set;
}

inline PairedDataset to_paired(const RetrievalSet& set) {
  PairedDataset ds;
  ds.shape = set.shape;
  for (const auto& [i, t] : set.positives) ds.pairs.emplace_back(set.images[i], set.texts[t]);
  return ds;
}

inline RetrievalSet to_retrieval_set(const PairedDataset& ds) {
  RetrievalSet set;
  set.shape = ds.shape;
  std::map<std::string, std::size_t> image_index;
  for (const auto& [img, txt] : ds.pairs) {
    auto [it, fresh] = image_index.emplace(img.id, set.images.size());
    if (fresh) set.images.push_back(img);
    set.positives.emplace_back(it->second, set.texts.size());
    set.texts.push_back(txt);
  }
  return set;
}

inline constexpr const char* kRecordsFile = "records.jsonl";
inline constexpr const char* kPairsFile = "pairs.jsonl";
inline constexpr const char* kTriplesFile = "triples.jsonl";

// Writes records.jsonl (unique images, then texts) and pairs.jsonl into dir.
inline void write_records(const PairedDataset& ds, const std::filesystem::path& dir) {
  RecordFile file;
  file.shape = ds.shape;
  std::vector<IdPair> ids;
  std::map<std::string, bool> seen;
  for (const auto& [img, txt] : ds.pairs) {
    if (seen.emplace(img.id, true).second) file.records.push_back(img);
    ids.emplace_back(img.id, txt.id);
  }
  for (const auto& [img, txt] : ds.pairs) file.records.push_back(txt);
  write_record_file(dir / kRecordsFile, file);
  write_pairs(dir / kPairsFile, ids);
}

inline RetrievalSet read_retrieval_set(const std::filesystem::path& dir) {
  return link_records(read_record_file(dir / kRecordsFile), read_pairs(dir / kPairsFile));
}

inline PairedDataset read_records(const std::filesystem::path& dir) {
  return to_paired(read_retrieval_set(dir));
}

}  // namespace comalign::ingestion

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "comalign/encoder.hpp"
#include "comalign/error.hpp"
#include "comalign/ingestion/base64.hpp"
#include "comalign/ingestion/batching.hpp"
#include "comalign/ingestion/records.hpp"
#include "comalign/matching.hpp"
#include "comalign/numerics/gradcheck.hpp"
#include "comalign/numerics/tape.hpp"
#include "comalign/objective.hpp"

namespace comalign::training {

using encoder::EncoderConfig;
using encoder::EncoderParams;
using ingestion::PairedDataset;
using num::Tape;
using num::Tensor;
using num::Var;

struct RunConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 30;
  double lr0 = 1e-4;
  std::size_t step_size = 10;
  double gamma = 0.5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double tau = 1.0;
  bool use_global = true;
  bool use_entity = true;
  bool use_relation = true;
  bool train_image_encoder = true;
  bool train_text_encoder = true;
  std::size_t n_entities = 10;
  std::size_t m_relations = 10;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t ffn_ratio = 4;
  std::size_t layers = 2;
  std::uint64_t seed = 0;
  double alpha1 = 0.1;
  double alpha2 = 0.033;
  double beta1_inf = 0.33;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  bool shuffle = true;
  bool positional_encoding = true;
  double embed_scale = 0.0;
  std::string architecture = "transformer";
  bool exclude_entities = false;
  bool exclude_relations = false;
  bool image_bypass = false;
  bool text_bypass = false;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    if (!v.empty() && v[0] != '-') out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

}  // namespace detail

struct Field {
  std::string name;
  std::string kind;  // "int", "float", "bool", "string"
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

// Every RunConfig field, by its config-file key.
inline const std::vector<Field>& fields() {
  static const std::vector<Field> registry = [] {
    std::vector<Field> f;
    auto uint_field = [&](const char* name, auto member) {
      f.push_back({name, "int", [member](const RunConfig& c) { return std::to_string(c.*member); },
                   [member, name](RunConfig& c, const std::string& v) {
                     using T = std::remove_reference_t<decltype(c.*member)>;
                     c.*member = static_cast<T>(detail::parse_uint(name, v));
                   }});
    };
    auto real_field = [&](const char* name, double RunConfig::*member) {
      f.push_back({name, "float", [member](const RunConfig& c) { return detail::format_double(c.*member); },
                   [member, name](RunConfig& c, const std::string& v) {
                     c.*member = detail::parse_double(name, v);
                   }});
    };
    auto bool_field = [&](const char* name, bool RunConfig::*member) {
      f.push_back({name, "bool", [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); },
                   [member, name](RunConfig& c, const std::string& v) {
                     c.*member = detail::parse_bool(name, v);
                   }});
    };
    uint_field("batch_size", &RunConfig::batch_size);
    uint_field("epochs", &RunConfig::epochs);
    real_field("lr0", &RunConfig::lr0);
    uint_field("step_size", &RunConfig::step_size);
    real_field("gamma", &RunConfig::gamma);
    real_field("adam_beta1", &RunConfig::adam_beta1);
    real_field("adam_beta2", &RunConfig::adam_beta2);
    real_field("adam_eps", &RunConfig::adam_eps);
    real_field("weight_decay", &RunConfig::weight_decay);
    real_field("tau", &RunConfig::tau);
    bool_field("use_global", &RunConfig::use_global);
    bool_field("use_entity", &RunConfig::use_entity);
    bool_field("use_relation", &RunConfig::use_relation);
    bool_field("train_image_encoder", &RunConfig::train_image_encoder);
    bool_field("train_text_encoder", &RunConfig::train_text_encoder);
    uint_field("n_entities", &RunConfig::n_entities);
    uint_field("m_relations", &RunConfig::m_relations);
    uint_field("dim", &RunConfig::dim);
    uint_field("heads", &RunConfig::heads);
    uint_field("ffn_ratio", &RunConfig::ffn_ratio);
    uint_field("layers", &RunConfig::layers);
    uint_field("seed", &RunConfig::seed);
    real_field("alpha1", &RunConfig::alpha1);
    real_field("alpha2", &RunConfig::alpha2);
    real_field("beta1_inf", &RunConfig::beta1_inf);
    real_field("grad_clip", &RunConfig::grad_clip);
    bool_field("shuffle", &RunConfig::shuffle);
    bool_field("positional_encoding", &RunConfig::positional_encoding);
    real_field("embed_scale", &RunConfig::embed_scale);
    f.push_back({"architecture", "string", [](const RunConfig& c) { return c.architecture; },
                 [](RunConfig& c, const std::string& v) {
                   encoder::parse_architecture(v);
                   c.architecture = v;
                 }});
    bool_field("exclude_entities", &RunConfig::exclude_entities);
    bool_field("exclude_relations", &RunConfig::exclude_relations);
    bool_field("image_bypass", &RunConfig::image_bypass);
    bool_field("text_bypass", &RunConfig::text_bypass);
    return f;
  }();
  return registry;
}

inline const Field& field(const std::string& name) {
  for (const auto& f : fields())
    if (f.name == name) return f;
  throw ConfigError("unknown config key '" + name + "'");
}

inline void set_field(RunConfig& c, const std::string& key, const std::string& value) {
  field(key).set(c, value);
}

// Flat key=value text; '#' starts a comment. Keys are checked, values are not.
inline std::vector<std::pair<std::string, std::string>> read_config_pairs(std::istream& in,
                                                                         const std::string& source) {
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    field(key);
    out.emplace_back(std::move(key), detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline void apply_config_text(RunConfig& c, std::istream& in, const std::string& source = "config") {
  for (const auto& [k, v] : read_config_pairs(in, source)) set_field(c, k, v);
}

inline void apply_config_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  apply_config_text(c, in, path.string());
}

inline std::string to_config_text(const RunConfig& c) {
  std::string out;
  for (const auto& f : fields()) out += f.name + " = " + f.get(c) + "\n";
  return out;
}

inline objective::LossFlags loss_flags(const RunConfig& c) {
  return {c.use_global, c.use_entity, c.use_relation, c.tau};
}

inline EncoderConfig encoder_config(const RunConfig& c, ingestion::Modality m) {
  EncoderConfig e;
  e.dim = c.dim;
  e.heads = c.heads;
  e.ffn_ratio = c.ffn_ratio;
  e.layers = c.layers;
  e.n_entities = c.n_entities;
  e.m_relations = c.m_relations;
  e.positional_encoding = c.positional_encoding;
  e.embed_scale = c.embed_scale;
  e.architecture = encoder::parse_architecture(c.architecture);
  e.exclude_entities = c.exclude_entities;
  e.exclude_relations = c.exclude_relations;
  e.bypass = m == ingestion::Modality::image ? c.image_bypass : c.text_bypass;
  return e;
}

inline void validate(const RunConfig& c) {
  if (c.batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (!(c.lr0 >= 0.0) || !std::isfinite(c.lr0)) throw ConfigError("lr0 must be non-negative");
  if (!(c.gamma > 0.0 && c.gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
  if (c.step_size < 1) throw ConfigError("step_size must be at least 1");
  if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0) || !(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(c.adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(c.weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(c.grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
  if (!(c.embed_scale >= 0.0)) throw ConfigError("embed_scale must be non-negative");
  objective::validate(loss_flags(c));
  encoder::validate(encoder_config(c, ingestion::Modality::image));
  encoder::validate(encoder_config(c, ingestion::Modality::text));
}

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizerState {
  std::vector<Tensor> m, v;
  std::uint64_t t = 0;
};

struct AdamW {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

inline OptimizerState init_state(const std::vector<Tensor*>& params) {
  OptimizerState s;
  for (const Tensor* p : params) {
    s.m.emplace_back(p->shape());
    s.v.emplace_back(p->shape());
  }
  return s;
}

// One decoupled-decay Adam update, in place.
inline void adamw_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                       OptimizerState& s, const AdamW& h) {
  if (params.size() != grads.size() || params.size() != s.m.size() || params.size() != s.v.size())
    throw DimensionError("adamw_step: parameter, gradient and state counts differ");
  if (!(h.lr >= 0.0)) throw ConfigError("adamw_step: lr must be non-negative");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!num::same_shape(*params[k], grads[k]) || !num::same_shape(*params[k], s.m[k]))
      throw DimensionError("adamw_step: shape mismatch");
    if (!grads[k].all_finite()) throw NumericalError("adamw_step: non-finite gradient");
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(s.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = grads[k][i];
      s.m[k][i] = h.beta1 * s.m[k][i] + (1.0 - h.beta1) * g;
      s.v[k][i] = h.beta2 * s.v[k][i] + (1.0 - h.beta2) * g * g;
      const double mhat = s.m[k][i] / c1;
      const double vhat = s.v[k][i] / c2;
      p[i] -= h.lr * (mhat / (std::sqrt(vhat) + h.eps) + h.weight_decay * p[i]);
    }
  }
}

inline double steplr(double lr0, std::size_t epoch, std::size_t step_size, double gamma) {
  if (step_size < 1) throw ConfigError("steplr: step_size must be at least 1");
  return lr0 * std::pow(gamma, static_cast<double>(epoch / step_size));
}

// Scales gradients so their joint L2 norm is at most max_norm. Returns the norm before clipping.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g.data()) sq += x * x;
  const double n = std::sqrt(sq);
  if (max_norm > 0.0 && n > max_norm) {
    const double s = max_norm / n;
    for (auto& g : grads)
      for (double& x : g.data()) x *= s;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  RunConfig config;
  EncoderParams image;
  EncoderParams text;
  double final_loss = 0.0;
};

inline std::vector<Tensor*> leaves(EncoderParams& p) {
  std::vector<Tensor*> out;
  encoder::visit(p, [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

inline std::vector<Var> leaves(const encoder::EncoderVars& p) {
  std::vector<Var> out;
  encoder::visit(p, [&](const std::string&, const Var& v) { out.push_back(v); });
  return out;
}

inline EncoderParams round_to_f32(const EncoderParams& p) {
  return encoder::map_params<Tensor>(p, [](const Tensor& t) {
    Tensor r = t;
    for (double& x : r.data()) x = ingestion::round_to_f32(x);
    return r;
  });
}

inline nlohmann::json params_to_json(const EncoderParams& p) {
  nlohmann::json j = nlohmann::json::object();
  encoder::visit(p, [&](const std::string& name, const Tensor& t) {
    j[name] = {{"shape", t.shape()}, {"data", ingestion::encode_f32le(t.data())}};
  });
  return j;
}

inline void params_from_json(const nlohmann::json& j, EncoderParams& p, const std::string& which) {
  std::size_t seen = 0;
  encoder::visit(p, [&](const std::string& name, Tensor& t) {
    if (!j.contains(name)) throw FormatError("checkpoint: missing " + which + " parameter " + name);
    const auto& e = j.at(name);
    const auto shape = e.at("shape").get<std::vector<std::size_t>>();
    if (shape != t.shape()) throw FormatError("checkpoint: shape mismatch for " + which + "." + name);
    auto data = ingestion::decode_f32le(e.at("data").get<std::string>());
    if (data.size() != t.size()) throw FormatError("checkpoint: size mismatch for " + which + "." + name);
    t = Tensor(shape, std::move(data));
    ++seen;
  });
  if (seen != j.size()) throw FormatError("checkpoint: unexpected " + which + " parameters");
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : fields()) j[f.name] = f.get(c);
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  for (const auto& [k, v] : j.items()) set_field(c, k, v.get<std::string>());
  return c;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json j;
  j["format"] = "comalign-checkpoint";
  j["version"] = 1;
  j["config"] = config_to_json(ck.config);
  j["final_loss"] = ck.final_loss;
  j["image"] = params_to_json(ck.image);
  j["text"] = params_to_json(ck.text);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out << j.dump(1) << '\n';
}

// Accepts the file itself or its path without the ".json" suffix.
inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::filesystem::path p = path;
  if (!std::filesystem::is_regular_file(p)) {
    std::filesystem::path alt = p;
    alt += ".json";
    if (!std::filesystem::is_regular_file(alt)) throw FormatError("no checkpoint at " + path.string());
    p = alt;
  }
  std::ifstream in(p, std::ios::binary);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
  try {
    if (j.value("format", "") != "comalign-checkpoint") throw FormatError(p.string() + ": not a checkpoint");
    Checkpoint ck;
    ck.config = config_from_json(j.at("config"));
    validate(ck.config);
    ck.image = encoder::init_params(encoder_config(ck.config, ingestion::Modality::image), 0);
    ck.text = encoder::init_params(encoder_config(ck.config, ingestion::Modality::text), 0);
    params_from_json(j.at("image"), ck.image, "image");
    params_from_json(j.at("text"), ck.text, "text");
    ck.final_loss = j.at("final_loss").get<double>();
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Loop

struct PreparedPairs {
  std::vector<encoder::TokenSequence> images, texts;
};

inline PreparedPairs prepare(const PairedDataset& ds, const RunConfig& c) {
  if (ds.shape.dim != c.dim) throw DimensionError("dataset dim does not match config dim");
  PreparedPairs out;
  for (const auto& [img, txt] : ds.pairs) {
    out.images.push_back(encoder::assemble_sequence(img, c.dim, c.n_entities, c.m_relations));
    out.texts.push_back(encoder::assemble_sequence(txt, c.dim, c.n_entities, c.m_relations));
  }
  return out;
}

struct StepGraph {
  Tape tape;
  encoder::EncoderVars image, text;
  matching::BundleVars bundle;
  Var loss;
};

// Builds encode -> bundle -> loss on a fresh tape for the given pairs.
inline void build_step(StepGraph& g, const RunConfig& c, const EncoderParams& image,
                       const EncoderParams& text, const PreparedPairs& data,
                       const std::vector<std::size_t>& batch, bool train_image, bool train_text) {
  std::vector<const encoder::TokenSequence*> is, ts;
  for (std::size_t k : batch) {
    is.push_back(&data.images[k]);
    ts.push_back(&data.texts[k]);
  }
  const auto bi = encoder::stack(is);
  const auto bt = encoder::stack(ts);
  const auto ci = encoder_config(c, ingestion::Modality::image);
  const auto ct = encoder_config(c, ingestion::Modality::text);
  g.image = encoder::bind(g.tape, image, train_image);
  g.text = encoder::bind(g.tape, text, train_text);
  Var zi = encoder::encode_on_tape(g.tape, ci, g.image, bi);
  Var zt = encoder::encode_on_tape(g.tape, ct, g.text, bt);
  g.bundle = matching::bundle_on_tape(g.tape, zi, encoder::effective_mask(bi, ci), zt,
                                           encoder::effective_mask(bt, ct), batch.size(),
                                           c.n_entities, c.m_relations);
  g.loss = objective::contrastive_loss(g.tape, g.bundle, loss_flags(c));
}

// Size-weighted mean breakdown over the dataset in order, batches of
// batch_size, no updates.
inline objective::LossBreakdown evaluate_breakdown(const PreparedPairs& data, const RunConfig& c,
                                                   const EncoderParams& image, const EncoderParams& text) {
  const auto batches = ingestion::make_batches(data.images.size(), c.batch_size, 0, false,
                                               ingestion::BatchMode::evaluation);
  const auto flags = loss_flags(c);
  objective::LossBreakdown sum;
  std::size_t n = 0;
  for (const auto& b : batches) {
    StepGraph g;
    build_step(g, c, image, text, data, b, false, false);
    const auto parts = objective::breakdown(matching::values(g.tape, g.bundle), flags);
    const double w = static_cast<double>(b.size());
    sum.total += w * g.tape.value(g.loss)[0];
    for (std::size_t k = 0; k < 3; ++k) {
      sum.i2t[k] += w * parts.i2t[k];
      sum.t2i[k] += w * parts.t2i[k];
    }
    n += b.size();
  }
  if (n == 0) return sum;
  const double inv = 1.0 / static_cast<double>(n);
  sum.total *= inv;
  for (std::size_t k = 0; k < 3; ++k) {
    sum.i2t[k] *= inv;
    sum.t2i[k] *= inv;
  }
  return sum;
}

inline double evaluate_loss(const PreparedPairs& data, const RunConfig& c,
                            const EncoderParams& image, const EncoderParams& text) {
  return evaluate_breakdown(data, c, image, text).total;
}

inline double evaluate_loss(const PairedDataset& ds, const Checkpoint& ck) {
  return evaluate_loss(prepare(ds, ck.config), ck.config, ck.image, ck.text);
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  objective::LossBreakdown loss;  // whole training set after the epoch, checkpoint precision
  double batch_mean = 0.0;        // running mean of the epoch's mini-batch losses
};

inline std::string loss_csv_header() {
  return "epoch,lr,L_total,L_I2T_E,L_I2T_R,L_I2T_G,L_T2I_E,L_T2I_R,L_T2I_G";
}

inline std::string loss_csv_row(const EpochLog& e) {
  using matching::format_g9;
  std::string s = std::to_string(e.epoch) + "," + format_g9(e.lr) + "," + format_g9(e.loss.total);
  for (double v : e.loss.i2t) s += "," + format_g9(v);
  for (double v : e.loss.t2i) s += "," + format_g9(v);
  return s;
}

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // last.json, best.json, loss.csv
  // Higher is better; when set it decides the best checkpoint.
  std::function<double(const Checkpoint&)> validation;
  std::ostream* progress = nullptr;
};

struct TrainResult {
  Checkpoint last;
  Checkpoint best;
  std::vector<EpochLog> log;
};

inline std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (epoch + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline TrainResult train(const PairedDataset& ds, const RunConfig& c, const TrainOptions& opt = {}) {
  validate(c);
  if (ds.shape.n_entities > c.n_entities || ds.shape.m_relations > c.m_relations)
    throw DimensionError("dataset component counts exceed config N/M");
  if (ds.size() < 2) throw ConfigError("training needs at least 2 pairs");
  const PreparedPairs data = prepare(ds, c);
  EncoderParams image = encoder::init_params(encoder_config(c, ingestion::Modality::image), c.seed);
  EncoderParams text = encoder::init_params(encoder_config(c, ingestion::Modality::text), c.seed);

  std::vector<Tensor*> trainable;
  if (c.train_image_encoder)
    for (Tensor* t : leaves(image)) trainable.push_back(t);
  if (c.train_text_encoder)
    for (Tensor* t : leaves(text)) trainable.push_back(t);
  OptimizerState state = init_state(trainable);

  std::ofstream loss_log;
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    loss_log.open(*opt.out_dir / "loss.csv", std::ios::binary);
    if (!loss_log) throw FormatError("cannot write loss log in " + opt.out_dir->string());
    loss_log << loss_csv_header() << '\n';
  }

  TrainResult result;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    const double lr = steplr(c.lr0, epoch, c.step_size, c.gamma);
    const auto batches = ingestion::make_batches(data.images.size(), c.batch_size,
                                                 epoch_seed(c.seed, epoch), c.shuffle);
    EpochLog entry{epoch, lr, {}};
    std::size_t seen = 0;
    for (std::size_t bidx = 0; bidx < batches.size(); ++bidx) {
      const auto& batch = batches[bidx];
      StepGraph g;
      build_step(g, c, image, text, data, batch, c.train_image_encoder, c.train_text_encoder);
      const double loss = g.tape.value(g.loss)[0];
      if (!std::isfinite(loss))
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(bidx));
      g.tape.backward(g.loss);
      std::vector<Tensor> grads;
      if (c.train_image_encoder)
        for (Var v : leaves(g.image)) grads.push_back(g.tape.grad(v));
      if (c.train_text_encoder)
        for (Var v : leaves(g.text)) grads.push_back(g.tape.grad(v));
      for (const auto& gr : grads)
        if (!gr.all_finite())
          throw NumericalError("non-finite gradient at epoch " + std::to_string(epoch) +
                               ", batch " + std::to_string(bidx));
      clip_global_norm(grads, c.grad_clip);
      adamw_step(trainable, grads, state, {lr, c.adam_beta1, c.adam_beta2, c.adam_eps, c.weight_decay});

      entry.batch_mean += static_cast<double>(batch.size()) * loss;
      seen += batch.size();
    }
    entry.batch_mean /= static_cast<double>(seen);

    Checkpoint ck{c, round_to_f32(image), round_to_f32(text), 0.0};
    entry.loss = evaluate_breakdown(data, c, ck.image, ck.text);
    ck.final_loss = entry.loss.total;
    result.log.push_back(entry);
    const double score = opt.validation ? opt.validation(ck) : -ck.final_loss;
    const bool improved = epoch == 0 || score > best_score;
    if (improved) {
      best_score = score;
      result.best = ck;
    }
    if (opt.out_dir) {
      loss_log << loss_csv_row(entry) << '\n' << std::flush;
      write_checkpoint(*opt.out_dir / "last.json", ck);
      if (improved) write_checkpoint(*opt.out_dir / "best.json", ck);
    }
    if (opt.progress)
      *opt.progress << "epoch " << epoch << " lr " << matching::format_g9(lr) << " loss "
                    << matching::format_g9(entry.batch_mean) << " train_set "
                    << matching::format_g9(ck.final_loss) << '\n';
    result.last = std::move(ck);
  }
  if (c.epochs == 0) {
    Checkpoint ck{c, round_to_f32(image), round_to_f32(text), 0.0};
    ck.final_loss = evaluate_loss(data, c, ck.image, ck.text);
    result.last = result.best = ck;
    if (opt.out_dir) {
      write_checkpoint(*opt.out_dir / "last.json", ck);
      write_checkpoint(*opt.out_dir / "best.json", ck);
    }
  }
  return result;
}

struct PipelineGradCheck {
  num::GradCheckResult result;
  std::string worst_parameter;  // "image.<name>" or "text.<name>"
  std::size_t parameters = 0;   // scalar entries checked
};

// Finite differences of encode -> bundle -> loss against the tape gradient,
// over every parameter of both heads. Heads start from distinct seeds here so
// the check does not rely on their symmetry.
inline PipelineGradCheck check_pipeline_gradients(const PairedDataset& ds, const RunConfig& c,
                                                  double eps = 1e-5) {
  validate(c);
  const PreparedPairs data = prepare(ds, c);
  EncoderParams image = encoder::init_params(encoder_config(c, ingestion::Modality::image), c.seed);
  EncoderParams text = encoder::init_params(encoder_config(c, ingestion::Modality::text), c.seed + 1);
  std::vector<std::size_t> batch(data.images.size());
  std::iota(batch.begin(), batch.end(), std::size_t{0});

  std::vector<std::string> names;
  std::vector<Tensor> flat;
  encoder::visit(image, [&](const std::string& n, const Tensor& t) {
    names.push_back("image." + n);
    flat.push_back(t);
  });
  const std::size_t n_image = flat.size();
  encoder::visit(text, [&](const std::string& n, const Tensor& t) {
    names.push_back("text." + n);
    flat.push_back(t);
  });

  auto unpack = [&](const std::vector<Tensor>& ps, EncoderParams& img, EncoderParams& txt) {
    std::size_t k = 0;
    for (Tensor* t : leaves(img)) *t = ps[k++];
    for (Tensor* t : leaves(txt)) *t = ps[k++];
  };
  auto value = [&](const std::vector<Tensor>& ps) {
    EncoderParams img = image, txt = text;
    unpack(ps, img, txt);
    StepGraph g;
    build_step(g, c, img, txt, data, batch, false, false);
    return g.tape.value(g.loss)[0];
  };

  StepGraph g;
  build_step(g, c, image, text, data, batch, true, true);
  g.tape.backward(g.loss);
  std::vector<Tensor> analytic;
  for (Var v : leaves(g.image)) analytic.push_back(g.tape.grad(v));
  for (Var v : leaves(g.text)) analytic.push_back(g.tape.grad(v));
  if (analytic.size() != flat.size() || n_image > flat.size())
    throw DimensionError("gradient check: parameter count mismatch");

  PipelineGradCheck out;
  out.result = num::finite_diff_check(value, flat, analytic, eps);
  for (const auto& t : flat) out.parameters += t.size();
  if (!names.empty()) out.worst_parameter = names[out.result.worst_tensor];
  return out;
}

}  // namespace comalign::training

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "comalign/components.hpp"
#include "comalign/error.hpp"
#include "comalign/inference.hpp"
#include "comalign/ingestion/records.hpp"
#include "comalign/ingestion/synth.hpp"
#include "comalign/training.hpp"

namespace comalign::cli {

namespace fs = std::filesystem;
using training::RunConfig;

enum ExitCode : int { kOk = 0, kInvalid = 1, kNumerical = 2 };

namespace detail {

// RunConfig keys accepted as --key on every subcommand; the string values are
// applied after the --config file so flags win.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;

  void attach(CLI::App& app) {
    app.add_option("--config", config_file, "key=value RunConfig file")->check(CLI::ExistingFile);
    for (const auto& f : training::fields()) {
      std::string names = "--" + f.name;
      if (f.name == "n_entities") names += ",--entities";
      if (f.name == "m_relations") names += ",--relations";
      if (f.name == "batch_size") names += ",--batch";
      app.add_option(names, values[f.name], "RunConfig " + f.kind);
    }
  }

  // Keys given on the command line (non-empty), after the file.
  std::map<std::string, std::string> resolved(const CLI::App& app) const {
    std::map<std::string, std::string> out;
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw ConfigError("cannot open config file " + config_file);
      for (auto& [k, v] : training::read_config_pairs(in, config_file)) out[k] = v;
    }
    for (const auto& [k, v] : values)
      if (app.count("--" + k) > 0) out[k] = v;
    return out;
  }

  RunConfig apply(const CLI::App& app, RunConfig base = {}) const {
    for (const auto& [k, v] : resolved(app)) training::set_field(base, k, v);
    return base;
  }

  // Only the inference weights may override a checkpoint's stored config.
  inference::Weights weights(const CLI::App& app, const RunConfig& stored) const {
    RunConfig c = stored;
    for (const auto& [k, v] : resolved(app))
      if (k == "alpha1" || k == "alpha2" || k == "beta1_inf") training::set_field(c, k, v);
    return inference::weights(c);
  }
};

inline std::vector<double> parse_grid(const std::string& s, const std::string& name) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(training::detail::parse_double(name, training::detail::trim(item)));
  if (out.empty()) throw ConfigError(name + ": empty grid");
  return out;
}

inline const ingestion::ComponentRecord& find_record(const std::vector<ingestion::ComponentRecord>& rs,
                                                     const std::string& id, const char* what) {
  for (const auto& r : rs)
    if (r.id == id) return r;
  throw FormatError(std::string("no ") + what + " record with id '" + id + "'");
}

inline std::vector<components::DetectionBox> read_boxes(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw FormatError(path.string() + ": expected an array of boxes");
  std::vector<components::DetectionBox> boxes;
  for (const auto& b : j) {
    components::DetectionBox d;
    if (b.is_array()) {
      if (b.size() != 5) throw FormatError(path.string() + ": box needs x1,y1,x2,y2,confidence");
      d = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>(),
           b[4].get<double>(), {}};
    } else {
      d = {b.at("x1").get<double>(), b.at("y1").get<double>(), b.at("x2").get<double>(),
           b.at("y2").get<double>(), b.at("confidence").get<double>(), b.value("label", "")};
    }
    components::validate(d);
    boxes.push_back(d);
  }
  return boxes;
}

inline std::ostream& open_or(std::ofstream& file, const std::string& path, std::ostream& fallback) {
  if (path.empty()) return fallback;
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  file.open(p, std::ios::binary);
  if (!file) throw FormatError("cannot write " + path);
  return file;
}

}  // namespace detail

// Entry point: returns the process exit code.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"comalign: component-level image-text alignment"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "generate a synthetic paired or triple dataset");
  detail::ConfigFlags synth_cfg;
  synth_cfg.attach(*synth);
  ingestion::SynthOptions so;
  std::string synth_kind = "pairs", synth_out;
  synth->add_option("--pairs,--count", so.count, "number of pairs or triples")->required();
  synth->add_option("--noise", so.noise_sigma, "component noise scale");
  synth->add_option("--global-noise", so.global_noise, "extra noise on global vectors");
  synth->add_option("--group-size", so.group_size, "pairs sharing one raw global latent");
  synth->add_option("--kind", synth_kind, "pairs | triples")->check(CLI::IsMember({"pairs", "triples"}));
  synth->add_option("-o,--out", synth_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "train both alignment heads");
  detail::ConfigFlags train_cfg;
  train_cfg.attach(*train);
  std::string train_data, train_out, train_val;
  train->add_option("--data", train_data, "training dataset directory")->required();
  train->add_option("--val", train_val, "validation dataset directory (selects best)");
  train->add_option("-o,--out", train_out, "checkpoint directory")->required();
  bool train_quiet = false;
  train->add_flag("--quiet", train_quiet, "no per-epoch progress");

  // eval-retrieval
  auto* evr = app.add_subcommand("eval-retrieval", "R@K in both directions");
  detail::ConfigFlags evr_cfg;
  evr_cfg.attach(*evr);
  std::string evr_ckpt, evr_data, evr_csv;
  evr->add_option("--checkpoint", evr_ckpt, "checkpoint file")->required();
  evr->add_option("--data", evr_data, "dataset directory")->required();
  evr->add_option("--csv", evr_csv, "also write the report as CSV");

  // eval-binary
  auto* evb = app.add_subcommand("eval-binary", "two-caption classification accuracy");
  detail::ConfigFlags evb_cfg;
  evb_cfg.attach(*evb);
  std::string evb_ckpt, evb_data, evb_csv;
  evb->add_option("--checkpoint", evb_ckpt, "checkpoint file")->required();
  evb->add_option("--data", evb_data, "triples directory")->required();
  evb->add_option("--csv", evb_csv, "per-item predictions as CSV");

  // score
  auto* score = app.add_subcommand("score", "fused scores for one image-text pair");
  detail::ConfigFlags score_cfg;
  score_cfg.attach(*score);
  std::string score_ckpt, score_data, score_img, score_txt;
  score->add_option("--checkpoint", score_ckpt, "checkpoint file")->required();
  score->add_option("--data", score_data, "dataset directory")->required();
  score->add_option("--image", score_img, "image record id")->required();
  score->add_option("--text", score_txt, "text record id")->required();

  // dump-similarity
  auto* dump = app.add_subcommand("dump-similarity", "component cosine matrix for one pair");
  detail::ConfigFlags dump_cfg;
  dump_cfg.attach(*dump);
  std::string dump_ckpt, dump_data, dump_img, dump_txt, dump_kind = "entity", dump_out;
  dump->add_option("--checkpoint", dump_ckpt, "checkpoint file")->required();
  dump->add_option("--data", dump_data, "dataset directory")->required();
  dump->add_option("--image", dump_img, "image record id")->required();
  dump->add_option("--text", dump_txt, "text record id")->required();
  dump->add_option("--kind", dump_kind, "entity | relation")->check(CLI::IsMember({"entity", "relation"}));
  dump->add_option("-o,--out", dump_out, "CSV file (default stdout)");

  // relation-candidates
  auto* rel = app.add_subcommand("relation-candidates", "union boxes for pairs of detections");
  detail::ConfigFlags rel_cfg;
  rel_cfg.attach(*rel);
  std::string rel_boxes, rel_out;
  std::size_t rel_m = 10;
  rel->add_option("--boxes", rel_boxes, "JSON array of detections")->required()->check(CLI::ExistingFile);
  rel->add_option("-m,--keep", rel_m, "number of candidates kept");
  rel->add_option("-o,--out", rel_out, "CSV file (default stdout)");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of the full loss");
  detail::ConfigFlags gc_cfg;
  gc_cfg.attach(*gc);
  double gc_eps = 1e-5, gc_tol = 1e-4, gc_noise = 0.25;
  gc->add_option("--eps", gc_eps, "central-difference step");
  gc->add_option("--tolerance", gc_tol, "maximum relative error");
  gc->add_option("--noise", gc_noise, "synthetic component noise");

  // sweep
  auto* sw = app.add_subcommand("sweep", "R@1 over a grid of inference weights");
  detail::ConfigFlags sw_cfg;
  sw_cfg.attach(*sw);
  std::string sw_ckpt, sw_data, sw_out, sw_a1 = "0,0.05,0.1,0.2", sw_a2 = "0,0.033,0.066",
                                        sw_b1 = "0,0.1,0.33,0.5";
  sw->add_option("--checkpoint", sw_ckpt, "checkpoint file")->required();
  sw->add_option("--data", sw_data, "dataset directory")->required();
  sw->add_option("--alpha1-grid", sw_a1, "comma-separated values");
  sw->add_option("--alpha2-grid", sw_a2, "comma-separated values");
  sw->add_option("--beta1-grid", sw_b1, "comma-separated values");
  sw->add_option("-o,--out", sw_out, "CSV file (default stdout)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kInvalid;
  }

  try {
    if (*synth) {
      const RunConfig c = synth_cfg.apply(*synth);
      so.dim = c.dim;
      so.n_entities = c.n_entities;
      so.m_relations = c.m_relations;
      so.seed = c.seed;
      if (synth_kind == "pairs") {
        ingestion::write_records(ingestion::synth_pairs(so), synth_out);
      } else {
        ingestion::write_binary_set(ingestion::synth_attribute_triples(so), synth_out);
      }
      out << "wrote " << so.count << ' ' << synth_kind << " to " << synth_out << '\n';
    } else if (*train) {
      const RunConfig c = train_cfg.apply(*train);
      const auto ds = ingestion::read_records(train_data);
      training::TrainOptions opt;
      opt.out_dir = fs::path(train_out);
      if (!train_quiet) opt.progress = &out;
      std::optional<ingestion::RetrievalSet> val;
      if (!train_val.empty()) {
        val = ingestion::read_retrieval_set(train_val);
        opt.validation = [&](const training::Checkpoint& ck) {
          return inference::mean_r1(inference::eval_retrieval(*val, ck, inference::weights(ck.config)));
        };
      }
      const auto res = training::train(ds, c, opt);
      out << "final_loss " << matching::format_g9(res.last.final_loss) << '\n';
      out << "checkpoints " << (fs::path(train_out) / "last.json").string() << ' '
          << (fs::path(train_out) / "best.json").string() << '\n';
    } else if (*evr) {
      const auto ck = training::read_checkpoint(evr_ckpt);
      const auto set = ingestion::read_retrieval_set(evr_data);
      const auto r = inference::eval_retrieval(set, ck, evr_cfg.weights(*evr, ck.config));
      inference::print_report(out, r);
      if (!evr_csv.empty()) {
        std::ofstream f;
        inference::write_report_csv(detail::open_or(f, evr_csv, out), r);
      }
    } else if (*evb) {
      const auto ck = training::read_checkpoint(evb_ckpt);
      const auto set = ingestion::read_binary_set(evb_data);
      const auto r = inference::eval_binary(set, ck, evb_cfg.weights(*evb, ck.config));
      char buf[64];
      std::snprintf(buf, sizeof buf, "accuracy %.4f (%zu/%zu)\n", r.accuracy(), r.correct, r.total);
      out << buf;
      if (!evb_csv.empty()) {
        std::ofstream f;
        auto& o = detail::open_or(f, evb_csv, out);
        o << "image_id,prediction,correct\n";
        for (std::size_t k = 0; k < r.total; ++k) {
          const int p = r.predictions[k];
          o << set.items[k].image.id << ',' << (p == 0 ? "A" : p == 1 ? "B" : "tie") << ','
            << (set.items[k].correct == 0 ? "A" : "B") << '\n';
        }
      }
    } else if (*score) {
      const auto ck = training::read_checkpoint(score_ckpt);
      const auto set = ingestion::read_retrieval_set(score_data);
      const auto p = inference::score_pair(detail::find_record(set.images, score_img, "image"),
                                           detail::find_record(set.texts, score_txt, "text"), ck,
                                           score_cfg.weights(*score, ck.config));
      using matching::format_g9;
      out << "base_global " << format_g9(p.base_global) << '\n'
          << "i2t_entity " << format_g9(p.fine.i2t_entity) << '\n'
          << "t2i_entity " << format_g9(p.fine.t2i_entity) << '\n'
          << "i2t_relation " << format_g9(p.fine.i2t_relation) << '\n'
          << "t2i_relation " << format_g9(p.fine.t2i_relation) << '\n'
          << "global " << format_g9(p.fine.global) << '\n'
          << "s_i2t " << format_g9(p.i2t) << '\n'
          << "s_t2i " << format_g9(p.t2i) << '\n';
    } else if (*dump) {
      const auto ck = training::read_checkpoint(dump_ckpt);
      const auto set = ingestion::read_retrieval_set(dump_data);
      const auto m = inference::dump_similarity(
          detail::find_record(set.images, dump_img, "image"), detail::find_record(set.texts, dump_txt, "text"),
          ck, dump_kind == "entity" ? inference::DumpKind::entity : inference::DumpKind::relation);
      std::ofstream f;
      matching::write_matrix_csv(detail::open_or(f, dump_out, out), m);
    } else if (*rel) {
      const auto boxes = detail::read_boxes(rel_boxes);
      const auto cands = components::relation_candidates(boxes, rel_m);
      std::ofstream f;
      auto& o = detail::open_or(f, rel_out, out);
      using matching::format_g9;
      o << "subject,object,x1,y1,x2,y2,score\n";
      for (const auto& c : cands)
        o << c.subject_index << ',' << c.object_index << ',' << format_g9(c.box.x1) << ','
          << format_g9(c.box.y1) << ',' << format_g9(c.box.x2) << ',' << format_g9(c.box.y2) << ','
          << format_g9(c.score) << '\n';
    } else if (*gc) {
      RunConfig base;
      base.batch_size = 3;
      base.n_entities = 3;
      base.m_relations = 3;
      base.dim = 16;
      const RunConfig c = gc_cfg.apply(*gc, base);
      ingestion::SynthOptions o;
      o.count = c.batch_size;
      o.dim = c.dim;
      o.n_entities = c.n_entities;
      o.m_relations = c.m_relations;
      o.noise_sigma = gc_noise;
      o.seed = c.seed;
      const auto r = training::check_pipeline_gradients(ingestion::synth_pairs(o), c, gc_eps);
      char buf[160];
      std::snprintf(buf, sizeof buf, "max_rel_err %.3e at %s[%zu] (analytic %.9g, numeric %.9g) over %zu entries\n",
                    r.result.max_rel_err, r.worst_parameter.c_str(), r.result.worst_entry, r.result.analytic,
                    r.result.numeric, r.parameters);
      out << buf;
      return r.result.max_rel_err < gc_tol ? kOk : kNumerical;
    } else if (*sw) {
      const auto ck = training::read_checkpoint(sw_ckpt);
      const auto set = ingestion::read_retrieval_set(sw_data);
      const auto rows = inference::sweep(set, ck, detail::parse_grid(sw_a1, "alpha1-grid"),
                                         detail::parse_grid(sw_a2, "alpha2-grid"),
                                         detail::parse_grid(sw_b1, "beta1-grid"));
      std::ofstream f;
      inference::write_sweep_csv(detail::open_or(f, sw_out, out), rows);
    }
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kInvalid;
  }
  return kOk;
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args);
}

}  // namespace comalign::cli

#pragma once

#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "medgen/corpus.hpp"
#include "medgen/decoder.hpp"
#include "medgen/entity_predictor.hpp"
#include "medgen/generator.hpp"

namespace medgen {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                           const std::string& where) {
  for (auto& [key, _] : j.items())
    if (!allowed.count(key)) throw ConfigError("unknown config key \"" + where + key + "\"");
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

struct PipelinePaths {
  std::string corpus = "corpus.jsonl";
  std::string vocab = "vocab.json";
  std::string entity_model = "entity_model.json";
  std::string thresholds = "thresholds.json";
  std::string generator_model = "generator_model.json";
  std::string decode_output = "decode_output.jsonl";
  std::string report = "report.json";
};

struct PipelineConfig {
  PipelinePaths paths;
  std::uint64_t seed = 0;
  SynthSpec synth;
  EntityTrainConfig entity;
  GenTrainConfig generator;
  EDBSConfig edbs;
  std::size_t bleu_max_n = 4;

  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
};

inline nlohmann::json PipelineConfig::to_json() const {
  nlohmann::json j;
  j["paths"] = {{"corpus", paths.corpus},
                {"vocab", paths.vocab},
                {"entity_model", paths.entity_model},
                {"thresholds", paths.thresholds},
                {"generator_model", paths.generator_model},
                {"decode_output", paths.decode_output},
                {"report", paths.report}};
  j["seed"] = seed;
  j["synth"] = {{"dialogues", synth.dialogues},
                {"entities", synth.entity_count},
                {"domains", synth.domain_count},
                {"min_turns", synth.min_turns},
                {"max_turns", synth.max_turns},
                {"max_entities_per_turn", synth.max_entities_per_turn}};
  j["entity"] = {{"dim", entity.model.dim},
                 {"heads", entity.model.heads},
                 {"max_len", entity.model.max_len},
                 {"msd_samples", entity.model.msd_samples},
                 {"msd_p", entity.model.msd_p},
                 {"epochs", entity.epochs},
                 {"val_fraction", entity.val_fraction},
                 {"use_fgm", entity.use_fgm},
                 {"use_ema", entity.use_ema},
                 {"include_history_entities", entity.include_history_entities},
                 {"base_lr", entity.opt.base_lr},
                 {"layer_decay", entity.opt.layer_decay},
                 {"ema_decay", entity.opt.ema_decay},
                 {"fgm_epsilon", entity.opt.fgm_epsilon}};
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : generator.stages)
    stages.push_back({{"epochs", s.epochs}, {"filter_min_entities", s.filter_min_entities}});
  j["generator"] = {{"dim", generator.model.dim},
                    {"heads", generator.model.heads},
                    {"enc_blocks", generator.model.enc_blocks},
                    {"dec_blocks", generator.model.dec_blocks},
                    {"max_len", generator.model.max_len},
                    {"lm_window", generator.model.lm_window},
                    {"self_term",
                     generator.model.self_term == SelfTerm::o_prev ? "o_prev" : "e_prev"},
                    {"mu", generator.model.weights.mu},
                    {"nu", generator.model.weights.nu},
                    {"lambda", generator.model.weights.lambda},
                    {"stages", stages},
                    {"folds", generator.folds},
                    {"entity_source",
                     generator.entity_source == EntitySource::gold ? "gold" : "predicted"},
                    {"base_lr", generator.opt.base_lr},
                    {"layer_decay", generator.opt.layer_decay}};
  std::string delims;
  for (char32_t c : edbs.delimiters) utf8::append(delims, c);
  j["edbs"] = {{"beam_width", edbs.beam_width},
               {"omega", edbs.omega},
               {"theta0", edbs.theta0},
               {"decay", edbs.decay},
               {"edit_distance", edbs.edit_distance},
               {"max_steps", edbs.max_steps},
               {"delimiters", delims},
               {"diversity_strength", edbs.diversity_strength},
               {"augment_template", edbs.augment_template},
               {"recompute_after_delete", edbs.recompute_after_delete},
               {"literal_sentence_distance", edbs.literal_sentence_distance},
               {"sample_pool_factor", edbs.sample_pool_factor}};
  j["metrics"] = {{"bleu_max_n", bleu_max_n}};
  return j;
}

inline PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  using detail::read;
  PipelineConfig c;
  detail::reject_unknown(
      j, {"paths", "seed", "synth", "entity", "generator", "edbs", "metrics"}, "");
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    detail::reject_unknown(p,
                           {"corpus", "vocab", "entity_model", "thresholds", "generator_model",
                            "decode_output", "report"},
                           "paths.");
    read(p, "corpus", c.paths.corpus);
    read(p, "vocab", c.paths.vocab);
    read(p, "entity_model", c.paths.entity_model);
    read(p, "thresholds", c.paths.thresholds);
    read(p, "generator_model", c.paths.generator_model);
    read(p, "decode_output", c.paths.decode_output);
    read(p, "report", c.paths.report);
  }
  read(j, "seed", c.seed);
  if (j.contains("synth")) {
    const auto& s = j.at("synth");
    detail::reject_unknown(
        s, {"dialogues", "entities", "domains", "min_turns", "max_turns", "max_entities_per_turn"},
        "synth.");
    read(s, "dialogues", c.synth.dialogues);
    read(s, "entities", c.synth.entity_count);
    read(s, "domains", c.synth.domain_count);
    read(s, "min_turns", c.synth.min_turns);
    read(s, "max_turns", c.synth.max_turns);
    read(s, "max_entities_per_turn", c.synth.max_entities_per_turn);
    c.synth.validate();
  }
  if (j.contains("entity")) {
    const auto& e = j.at("entity");
    detail::reject_unknown(e,
                           {"dim", "heads", "max_len", "msd_samples", "msd_p", "epochs",
                            "val_fraction", "use_fgm", "use_ema", "include_history_entities",
                            "base_lr", "layer_decay", "ema_decay", "fgm_epsilon"},
                           "entity.");
    read(e, "dim", c.entity.model.dim);
    read(e, "heads", c.entity.model.heads);
    read(e, "max_len", c.entity.model.max_len);
    read(e, "msd_samples", c.entity.model.msd_samples);
    read(e, "msd_p", c.entity.model.msd_p);
    read(e, "epochs", c.entity.epochs);
    read(e, "val_fraction", c.entity.val_fraction);
    read(e, "use_fgm", c.entity.use_fgm);
    read(e, "use_ema", c.entity.use_ema);
    read(e, "include_history_entities", c.entity.include_history_entities);
    read(e, "base_lr", c.entity.opt.base_lr);
    read(e, "layer_decay", c.entity.opt.layer_decay);
    read(e, "ema_decay", c.entity.opt.ema_decay);
    read(e, "fgm_epsilon", c.entity.opt.fgm_epsilon);
    c.entity.opt.validate();
  }
  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    detail::reject_unknown(g,
                           {"dim", "heads", "enc_blocks", "dec_blocks", "max_len", "lm_window",
                            "self_term", "mu", "nu", "lambda", "stages", "folds", "entity_source",
                            "base_lr", "layer_decay"},
                           "generator.");
    read(g, "dim", c.generator.model.dim);
    read(g, "heads", c.generator.model.heads);
    read(g, "enc_blocks", c.generator.model.enc_blocks);
    read(g, "dec_blocks", c.generator.model.dec_blocks);
    read(g, "max_len", c.generator.model.max_len);
    read(g, "lm_window", c.generator.model.lm_window);
    if (g.contains("self_term")) {
      const auto s = g.at("self_term").get<std::string>();
      if (s == "o_prev") c.generator.model.self_term = SelfTerm::o_prev;
      else if (s == "e_prev") c.generator.model.self_term = SelfTerm::e_prev;
      else throw ConfigError("generator.self_term must be \"o_prev\" or \"e_prev\"");
    }
    read(g, "mu", c.generator.model.weights.mu);
    read(g, "nu", c.generator.model.weights.nu);
    read(g, "lambda", c.generator.model.weights.lambda);
    c.generator.model.weights.validate();
    if (g.contains("stages")) {
      c.generator.stages.clear();
      for (const auto& sj : g.at("stages")) {
        detail::reject_unknown(sj, {"epochs", "filter_min_entities"}, "generator.stages.");
        StageConfig st;
        read(sj, "epochs", st.epochs);
        read(sj, "filter_min_entities", st.filter_min_entities);
        c.generator.stages.push_back(st);
      }
    }
    read(g, "folds", c.generator.folds);
    if (g.contains("entity_source")) {
      const auto s = g.at("entity_source").get<std::string>();
      if (s == "gold") c.generator.entity_source = EntitySource::gold;
      else if (s == "predicted") c.generator.entity_source = EntitySource::predicted;
      else throw ConfigError("generator.entity_source must be \"gold\" or \"predicted\"");
    }
    read(g, "base_lr", c.generator.opt.base_lr);
    read(g, "layer_decay", c.generator.opt.layer_decay);
    c.generator.opt.validate();
  }
  if (j.contains("edbs")) {
    const auto& e = j.at("edbs");
    detail::reject_unknown(e,
                           {"beam_width", "omega", "theta0", "decay", "edit_distance", "max_steps",
                            "delimiters", "diversity_strength", "augment_template",
                            "recompute_after_delete", "literal_sentence_distance",
                            "sample_pool_factor"},
                           "edbs.");
    read(e, "beam_width", c.edbs.beam_width);
    read(e, "omega", c.edbs.omega);
    read(e, "theta0", c.edbs.theta0);
    read(e, "decay", c.edbs.decay);
    read(e, "edit_distance", c.edbs.edit_distance);
    read(e, "max_steps", c.edbs.max_steps);
    if (e.contains("delimiters")) {
      c.edbs.delimiters.clear();
      for (char32_t ch : utf8::decode(e.at("delimiters").get<std::string>()))
        c.edbs.delimiters.insert(ch);
    }
    read(e, "diversity_strength", c.edbs.diversity_strength);
    read(e, "augment_template", c.edbs.augment_template);
    read(e, "recompute_after_delete", c.edbs.recompute_after_delete);
    read(e, "literal_sentence_distance", c.edbs.literal_sentence_distance);
    read(e, "sample_pool_factor", c.edbs.sample_pool_factor);
    if (c.edbs.omega <= 0.0 || c.edbs.omega >= 1.0)
      throw ConfigError("config range error: \"omega\" must be in (0,1)");
    c.edbs.validate();
  }
  if (j.contains("metrics")) {
    const auto& m = j.at("metrics");
    detail::reject_unknown(m, {"bleu_max_n"}, "metrics.");
    read(m, "bleu_max_n", c.bleu_max_n);
  }
  // seed propagates to every stochastic stage unless overridden in code
  c.synth.seed = c.seed;
  c.entity.seed = c.seed;
  c.generator.seed = c.seed;
  c.edbs.seed = c.seed;
  return c;
}

inline PipelineConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return PipelineConfig::from_json(j);
}

// ---- model files (config + tokenizer + parameters in one JSON document) ----

inline nlohmann::json entity_model_to_json(const EntityScorer& scorer, const Tokenizer& tok) {
  nlohmann::json j;
  j["type"] = "entity_scorer";
  j["config"] = {{"dim", scorer.cfg.dim},         {"heads", scorer.cfg.heads},
                 {"blocks", scorer.cfg.blocks},   {"max_len", scorer.cfg.max_len},
                 {"msd_samples", scorer.cfg.msd_samples}, {"msd_p", scorer.cfg.msd_p}};
  j["n_classes"] = scorer.n_classes;
  j["tokenizer"] = tok.to_json();
  j["params"] = params_to_json(scorer.params);
  return j;
}

inline void save_entity_model(const EntityScorer& scorer, const Tokenizer& tok,
                              const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write model: " + path);
  out << entity_model_to_json(scorer, tok).dump() << "\n";
}

inline std::pair<EntityScorer, Tokenizer> entity_model_from_json(const nlohmann::json& j) {
  EntityScorer scorer;
  const auto& cj = j.at("config");
  scorer.cfg = {cj.at("dim"), cj.at("heads"), cj.at("blocks"),
                cj.at("max_len"), cj.at("msd_samples"), cj.at("msd_p")};
  scorer.n_classes = j.at("n_classes");
  params_from_json(scorer.params, j.at("params"));
  return {std::move(scorer), Tokenizer::from_json(j.at("tokenizer"))};
}

inline std::pair<EntityScorer, Tokenizer> load_entity_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read model: " + path);
  nlohmann::json j;
  in >> j;
  return entity_model_from_json(j);
}

inline nlohmann::json generator_model_to_json(const FusionModel& model) {
  nlohmann::json j;
  j["type"] = "fusion_generator";
  j["config"] = {{"dim", model.cfg.dim},
                 {"heads", model.cfg.heads},
                 {"enc_blocks", model.cfg.enc_blocks},
                 {"dec_blocks", model.cfg.dec_blocks},
                 {"max_len", model.cfg.max_len},
                 {"lm_window", model.cfg.lm_window},
                 {"self_term", model.cfg.self_term == SelfTerm::o_prev ? "o_prev" : "e_prev"},
                 {"mu", model.cfg.weights.mu},
                 {"nu", model.cfg.weights.nu},
                 {"lambda", model.cfg.weights.lambda}};
  j["n_classes"] = model.n_classes;
  j["domain_count"] = model.domain_count;
  j["tokenizer"] = model.tok.to_json();
  j["params"] = params_to_json(model.params);
  return j;
}

inline FusionModel generator_model_from_json(const nlohmann::json& j) {
  FusionModel m;
  const auto& cj = j.at("config");
  m.cfg.dim = cj.at("dim");
  m.cfg.heads = cj.at("heads");
  m.cfg.enc_blocks = cj.at("enc_blocks");
  m.cfg.dec_blocks = cj.at("dec_blocks");
  m.cfg.max_len = cj.at("max_len");
  m.cfg.lm_window = cj.at("lm_window");
  m.cfg.self_term =
      cj.at("self_term").get<std::string>() == "o_prev" ? SelfTerm::o_prev : SelfTerm::e_prev;
  m.cfg.weights.mu = cj.at("mu");
  m.cfg.weights.nu = cj.at("nu");
  m.cfg.weights.lambda = cj.at("lambda");
  m.n_classes = j.at("n_classes");
  m.domain_count = j.at("domain_count");
  m.tok = Tokenizer::from_json(j.at("tokenizer"));
  params_from_json(m.params, j.at("params"));
  return m;
}

inline void save_generator_model(const FusionModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write model: " + path);
  out << generator_model_to_json(model).dump() << "\n";
}

inline FusionModel load_generator_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read model: " + path);
  nlohmann::json j;
  in >> j;
  return generator_model_from_json(j);
}

// One or more fold models in a single document; a single model stays in the
// plain fusion_generator layout for compatibility.
inline void save_generator_models(const std::vector<FusionModel>& models,
                                  const std::string& path) {
  if (models.empty()) throw std::invalid_argument("save_generator_models: empty");
  if (models.size() == 1) {
    save_generator_model(models[0], path);
    return;
  }
  nlohmann::json j;
  j["type"] = "fusion_generator_ensemble";
  j["members"] = nlohmann::json::array();
  for (const auto& m : models) j["members"].push_back(generator_model_to_json(m));
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write model: " + path);
  out << j.dump() << "\n";
}

inline std::vector<FusionModel> load_generator_models(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read model: " + path);
  nlohmann::json j;
  in >> j;
  std::vector<FusionModel> out;
  if (j.at("type") == "fusion_generator_ensemble") {
    for (const auto& mj : j.at("members")) out.push_back(generator_model_from_json(mj));
  } else {
    out.push_back(generator_model_from_json(j));
  }
  return out;
}

}  // namespace medgen

// medgen: end-to-end pipeline driver for the entity-aware dialogue generator.
//
// Subcommands: synth | stats | train-entity | search-thresholds | train-gen |
// decode | evaluate | compare-decoders | chat. Configuration comes from an
// optional JSON file (--config) with flags overriding individual leaves; every
// artifact gets an effective-config echo written beside it.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "medgen/config.hpp"
#include "medgen/decoder.hpp"
#include "medgen/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace medgen;

namespace {

// ---- config assembly: file -> json, flags -> json-pointer patches ----

struct FlagPatch {
  std::vector<std::function<void(json&)>> appliers;

  template <typename T>
  void add(CLI::App* sub, const std::string& flag, const std::string& ptr,
           const std::string& desc) {
    auto val = std::make_shared<T>();
    CLI::Option* opt = sub->add_option(flag, *val, desc);
    appliers.push_back([opt, val, ptr](json& j) {
      if (opt->count() > 0) j[json::json_pointer(ptr)] = *val;
    });
  }

  void apply(json& j) const {
    for (const auto& f : appliers) f(j);
  }
};

struct CommandContext {
  std::string config_path;
  FlagPatch patch;

  PipelineConfig resolve() const {
    json j = json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("cannot read config: " + config_path);
      try {
        in >> j;
      } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
      }
    }
    patch.apply(j);
    return PipelineConfig::from_json(j);
  }
};

// Registers --config plus the flag mirrors of every PipelineConfig leaf.
std::shared_ptr<CommandContext> register_common(CLI::App* sub) {
  auto ctx = std::make_shared<CommandContext>();
  sub->add_option("--config", ctx->config_path, "JSON pipeline configuration file");
  auto& p = ctx->patch;
  p.add<std::uint64_t>(sub, "--seed", "/seed", "master seed for all stochastic stages");
  p.add<std::string>(sub, "--corpus", "/paths/corpus", "corpus JSONL path");
  p.add<std::string>(sub, "--vocab", "/paths/vocab", "entity vocabulary JSON path");
  p.add<std::string>(sub, "--entity-model", "/paths/entity_model", "entity model path");
  p.add<std::string>(sub, "--thresholds", "/paths/thresholds", "threshold JSON path");
  p.add<std::string>(sub, "--generator-model", "/paths/generator_model", "generator model path");
  p.add<std::string>(sub, "--decode-output", "/paths/decode_output", "decode output JSONL path");
  p.add<std::string>(sub, "--report", "/paths/report", "evaluation report path");

  p.add<std::size_t>(sub, "--dialogues", "/synth/dialogues", "synthetic dialogue count");
  p.add<std::size_t>(sub, "--entities", "/synth/entities", "synthetic entity inventory size");
  p.add<std::size_t>(sub, "--domains", "/synth/domains", "synthetic domain type count");
  p.add<std::size_t>(sub, "--min-turns", "/synth/min_turns", "minimum turns per dialogue");
  p.add<std::size_t>(sub, "--max-turns", "/synth/max_turns", "maximum turns per dialogue");
  p.add<std::size_t>(sub, "--max-entities-per-turn", "/synth/max_entities_per_turn",
                     "maximum annotated entities per doctor turn");

  p.add<std::size_t>(sub, "--entity-dim", "/entity/dim", "entity scorer model width");
  p.add<std::size_t>(sub, "--entity-heads", "/entity/heads", "entity scorer attention heads");
  p.add<std::size_t>(sub, "--entity-epochs", "/entity/epochs", "entity training epochs");
  p.add<double>(sub, "--entity-val-fraction", "/entity/val_fraction", "validation split fraction");
  p.add<bool>(sub, "--entity-use-fgm", "/entity/use_fgm", "adversarial FGM pass");
  p.add<bool>(sub, "--entity-use-ema", "/entity/use_ema", "adopt EMA weights after training");
  p.add<bool>(sub, "--include-history-entities", "/entity/include_history_entities",
              "feed history entity annotations to the entity scorer");
  p.add<double>(sub, "--entity-base-lr", "/entity/base_lr", "entity learning rate");
  p.add<double>(sub, "--entity-layer-decay", "/entity/layer_decay", "stratified lr decay");
  p.add<double>(sub, "--entity-ema-decay", "/entity/ema_decay", "EMA decay");
  p.add<double>(sub, "--fgm-epsilon", "/entity/fgm_epsilon", "FGM perturbation radius");
  p.add<std::size_t>(sub, "--msd-samples", "/entity/msd_samples", "multi-sample dropout count");
  p.add<double>(sub, "--msd-p", "/entity/msd_p", "multi-sample dropout probability");

  p.add<std::size_t>(sub, "--gen-dim", "/generator/dim", "generator model width");
  p.add<std::size_t>(sub, "--gen-heads", "/generator/heads", "generator attention heads");
  p.add<std::size_t>(sub, "--enc-blocks", "/generator/enc_blocks", "encoder blocks");
  p.add<std::size_t>(sub, "--dec-blocks", "/generator/dec_blocks", "decoder blocks");
  p.add<std::size_t>(sub, "--lm-window", "/generator/lm_window", "LM loss context window");
  p.add<std::string>(sub, "--self-term", "/generator/self_term", "fusion self term: o_prev|e_prev");
  p.add<double>(sub, "--mu", "/generator/mu", "LM loss weight");
  p.add<double>(sub, "--nu", "/generator/nu", "domain-type loss weight");
  p.add<double>(sub, "--lambda", "/generator/lambda", "entity-type loss weight");
  p.add<std::size_t>(sub, "--folds", "/generator/folds", "bagging fold count");
  p.add<std::string>(sub, "--entity-source", "/generator/entity_source",
                     "conditioning entities: gold|predicted");
  p.add<double>(sub, "--gen-base-lr", "/generator/base_lr", "generator learning rate");

  p.add<std::size_t>(sub, "--beam-width", "/edbs/beam_width", "beam width B");
  p.add<double>(sub, "--omega", "/edbs/omega", "stochastic comparison point");
  p.add<double>(sub, "--theta0", "/edbs/theta0", "initial converge threshold");
  p.add<double>(sub, "--decay", "/edbs/decay", "per-step theta decay");
  p.add<std::size_t>(sub, "--edit-distance", "/edbs/edit_distance", "revision distance limit L");
  p.add<std::size_t>(sub, "--max-steps", "/edbs/max_steps", "maximum decode steps");
  p.add<std::string>(sub, "--delimiters", "/edbs/delimiters", "sentence delimiter characters");
  p.add<double>(sub, "--diversity-strength", "/edbs/diversity_strength", "repeat penalty weight");
  p.add<std::string>(sub, "--augment-template", "/edbs/augment_template",
                     "missing-entity sentence template");
  p.add<bool>(sub, "--recompute-after-delete", "/edbs/recompute_after_delete",
              "re-detect entities on the kept text");
  p.add<bool>(sub, "--literal-sentence-distance", "/edbs/literal_sentence_distance",
              "compare whole sentences instead of mentions");
  p.add<std::size_t>(sub, "--sample-pool-factor", "/edbs/sample_pool_factor",
                     "stochastic pool size multiplier");
  p.add<std::size_t>(sub, "--bleu-max-n", "/metrics/bleu_max_n", "maximum BLEU n-gram order");
  return ctx;
}

// ---- artifact writing: temp + rename, effective-config echo beside it ----

void write_artifact(const PipelineConfig& cfg, const std::string& path,
                    const std::string& content) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write artifact: " + path);
    out << content;
    if (!out) throw std::runtime_error("write failed: " + path);
  }
  fs::rename(tmp, path);
  std::ofstream echo(path + ".config.json", std::ios::binary);
  echo << cfg.to_json().dump(2) << "\n";
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// ---- shared pipeline pieces ----

struct LoadedCorpus {
  Corpus corpus;
  EntityVocabulary vocab;
};

LoadedCorpus load_inputs(const PipelineConfig& cfg) {
  EntityVocabulary vocab = EntityVocabulary::load(cfg.paths.vocab);
  Corpus corpus = load_corpus(cfg.paths.corpus, vocab);
  return {std::move(corpus), std::move(vocab)};
}

struct EntityPredictor {
  EntityScorer scorer;
  Tokenizer tok;
  ThresholdVector thresholds;

  std::vector<std::string> predict(const Dialogue& d, std::size_t upto_turn,
                                   const EntityVocabulary& vocab,
                                   bool include_history_entities) const {
    const auto lin = linearize_dialogue(d, tok, upto_turn, include_history_entities);
    const auto scores = scorer.predict_scores(lin);
    std::vector<std::string> out;
    for (std::size_t idx : apply_thresholds(scores, thresholds))
      out.push_back(vocab.surface_at(idx));
    return out;
  }
};

EntityPredictor load_entity_predictor(const PipelineConfig& cfg) {
  auto [scorer, tok] = load_entity_model(cfg.paths.entity_model);
  return {std::move(scorer), std::move(tok), ThresholdVector::load(cfg.paths.thresholds)};
}

std::vector<std::string> conditioning_entities(const PipelineConfig& cfg,
                                               const EntityPredictor* predictor,
                                               const Dialogue& d,
                                               const EntityVocabulary& vocab) {
  if (cfg.generator.entity_source == EntitySource::predicted && predictor)
    return predictor->predict(d, d.turns.size() - 1, vocab,
                              cfg.entity.include_history_entities);
  return d.turns.back().entities;
}

// One dialogue decoded with one strategy; candidates/report only for EDBS.
struct DecodeRecord {
  std::string response;
  json candidates = json::array();
  json revision_report;
};

DecodeRecord decode_one(const PipelineConfig& cfg, const std::string& strategy,
                        const TokenScorer& scorer, const Tokenizer& tok,
                        const std::vector<std::string>& entities,
                        const EntityVocabulary& vocab, std::uint64_t seed, double temperature,
                        std::size_t top_k, double top_p, std::size_t groups, double lambda_div) {
  DecodeRecord rec;
  const std::size_t max_len = cfg.edbs.max_steps;
  if (strategy == "greedy") {
    rec.response = tok.decode(greedy_decode(scorer, max_len));
  } else if (strategy == "beam") {
    rec.response = tok.decode(beam_search(scorer, cfg.edbs.beam_width, max_len)[0].tokens);
  } else if (strategy == "dbs") {
    rec.response = tok.decode(
        diverse_beam_search(scorer, cfg.edbs.beam_width, groups, lambda_div, max_len)[0].tokens);
  } else if (strategy == "top_k" || strategy == "top_p" || strategy == "multinomial") {
    Rng rng(seed);
    SampleMode mode = strategy == "top_k"   ? SampleMode::TopK(top_k)
                      : strategy == "top_p" ? SampleMode::TopP(top_p)
                                            : SampleMode::Multinomial();
    rec.response = tok.decode(sample_decode(scorer, mode, temperature, max_len, rng));
  } else if (strategy == "edbs") {
    EDBSConfig ecfg = cfg.edbs;
    ecfg.seed = seed;
    const auto out = edbs(scorer, tok, entities, vocab, ecfg);
    rec.response = out.response;
    for (const auto& c : out.candidates) {
      json cj;
      cj["text"] = tok.decode(c.raw.tokens);
      cj["revised_text"] = c.revised_text;
      cj["score"] = c.raw.score;
      cj["coverage"] = c.report.coverage;
      rec.candidates.push_back(std::move(cj));
    }
    const auto& rep = out.candidates.empty()
                          ? RevisionReport{}
                          : [&] {
                              for (const auto& c : out.candidates)
                                if (c.revised_text == out.response) return c.report;
                              return out.candidates.front().report;
                            }();
    json deleted = json::array();
    for (const auto& d : rep.deleted)
      deleted.push_back({{"sentence", d.sentence},
                         {"offending_mention", d.offending_mention},
                         {"min_distance", d.min_distance}});
    rec.revision_report = {{"deleted", deleted},
                           {"augmented", rep.augmented},
                           {"coverage", rep.coverage}};
  } else {
    throw std::invalid_argument("unknown decode strategy: " + strategy);
  }
  return rec;
}

json stats_to_json(const CorpusStats& s) {
  return {{"dialogues", s.dialogues},
          {"utterances", s.utterances},
          {"chars_per_dialogue", s.chars_per_dialogue},
          {"chars_per_utterance", s.chars_per_utterance},
          {"entities_per_dialogue", s.entities_per_dialogue},
          {"entities_per_utterance", s.entities_per_utterance}};
}

// ---- subcommand bodies ----

int cmd_synth(const PipelineConfig& cfg) {
  auto [corpus, vocab] = generate_synthetic_corpus(cfg.synth);
  std::ostringstream os;
  for (const auto& d : corpus) os << dialogue_to_json(d).dump() << "\n";
  write_artifact(cfg, cfg.paths.corpus, os.str());
  write_artifact(cfg, cfg.paths.vocab, vocab.to_json().dump() + "\n");
  std::cout << "wrote " << corpus.size() << " dialogues to " << cfg.paths.corpus << "\n"
            << "wrote " << vocab.size() << " entities to " << cfg.paths.vocab << "\n"
            << stats_to_json(corpus_stats(corpus)).dump(2) << "\n";
  return 0;
}

int cmd_stats(const PipelineConfig& cfg) {
  const auto in = load_inputs(cfg);
  std::cout << stats_to_json(corpus_stats(in.corpus)).dump(2) << "\n";
  return 0;
}

int cmd_train_entity(const PipelineConfig& cfg) {
  const auto in = load_inputs(cfg);
  const Tokenizer tok = build_tokenizer(in.corpus, in.vocab);
  const auto res = train_entity_predictor(in.corpus, in.vocab, tok, cfg.entity);
  write_artifact(cfg, cfg.paths.entity_model,
                 entity_model_to_json(res.scorer, tok).dump() + "\n");
  write_artifact(cfg, cfg.paths.thresholds, res.thresholds.to_json().dump() + "\n");
  json rep;
  rep["epoch_losses"] = res.report.epoch_losses;
  rep["val_searched"] = {{"precision", res.report.val_searched.precision},
                         {"recall", res.report.val_searched.recall},
                         {"f1", res.report.val_searched.f1}};
  rep["val_uniform_half"] = {{"precision", res.report.val_uniform_half.precision},
                             {"recall", res.report.val_uniform_half.recall},
                             {"f1", res.report.val_uniform_half.f1}};
  std::cout << rep.dump(2) << "\n";
  return 0;
}

int cmd_search_thresholds(const PipelineConfig& cfg) {
  const auto in = load_inputs(cfg);
  auto [scorer, tok] = load_entity_model(cfg.paths.entity_model);
  const auto examples =
      build_entity_examples(in.corpus, in.vocab, tok, cfg.entity.include_history_entities);
  if (examples.empty()) throw std::runtime_error("search-thresholds: no usable dialogues");
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<int>> labels;
  for (const auto& ex : examples) {
    scores.push_back(scorer.predict_scores(ex.input));
    labels.push_back(ex.labels);
  }
  ThresholdVector th = search_thresholds(scores, labels);
  th.weights = inverse_frequency_weights(labels, in.vocab.size());
  write_artifact(cfg, cfg.paths.thresholds, th.to_json().dump() + "\n");
  std::vector<std::vector<std::size_t>> pred, gold;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    pred.push_back(apply_thresholds(scores[i], th));
    gold.push_back(examples[i].gold_idx);
  }
  const auto f1 = multilabel_f1(pred, gold, in.vocab.size(), F1Mode::micro);
  std::cout << json({{"micro_f1", f1.f1}, {"classes", th.thresholds.size()}}).dump(2) << "\n";
  return 0;
}

int cmd_train_gen(const PipelineConfig& cfg) {
  const auto in = load_inputs(cfg);
  const Tokenizer tok = build_tokenizer(in.corpus, in.vocab);
  EntityPredictFn predict;
  if (cfg.generator.entity_source == EntitySource::predicted) {
    auto predictor = std::make_shared<EntityPredictor>(load_entity_predictor(cfg));
    const auto& vocab = in.vocab;
    const bool hist = cfg.entity.include_history_entities;
    predict = [predictor, &vocab, hist](const Dialogue& d, std::size_t upto) {
      return predictor->predict(d, upto, vocab, hist);
    };
  }
  GenTrainReport report;
  std::vector<FusionModel> models;
  if (cfg.generator.folds == 1) {
    models.push_back(
        train_generator_single(in.corpus, in.vocab, tok, cfg.generator, &report, predict));
  } else {
    auto folds = train_generator_folds(in.corpus, in.vocab, tok, cfg.generator, predict);
    models = std::move(folds.models);
  }
  std::ostringstream os;
  {
    if (models.size() == 1) {
      os << generator_model_to_json(models[0]).dump() << "\n";
    } else {
      json j;
      j["type"] = "fusion_generator_ensemble";
      j["members"] = json::array();
      for (const auto& m : models) j["members"].push_back(generator_model_to_json(m));
      os << j.dump() << "\n";
    }
  }
  write_artifact(cfg, cfg.paths.generator_model, os.str());
  json rep;
  rep["folds"] = models.size();
  rep["epoch_losses"] = report.epoch_losses;
  std::cout << rep.dump(2) << "\n";
  return 0;
}

struct DecodeParams {
  std::string strategy = "edbs";
  double temperature = 1.0;
  std::size_t top_k = 20;
  double top_p = 0.9;
  std::size_t groups = 2;
  double lambda_div = 0.5;
};

int cmd_decode(const PipelineConfig& cfg, const DecodeParams& dp) {
  const auto in = load_inputs(cfg);
  const auto models = load_generator_models(cfg.paths.generator_model);
  std::unique_ptr<EntityPredictor> predictor;
  if (cfg.generator.entity_source == EntitySource::predicted)
    predictor = std::make_unique<EntityPredictor>(load_entity_predictor(cfg));
  const Tokenizer& tok = models[0].tok;

  std::ostringstream os;
  std::size_t index = 0;
  for (const auto& d : in.corpus) {
    if (d.turns.size() < 2 || d.turns.back().speaker != Speaker::doctor) continue;
    const auto lin =
        linearize_dialogue(d, tok, d.turns.size() - 1, cfg.entity.include_history_entities);
    const auto entities = conditioning_entities(cfg, predictor.get(), d, in.vocab);
    std::vector<std::shared_ptr<TokenScorer>> members;
    for (const auto& m : models)
      members.push_back(std::make_shared<GeneratorScorer>(m, lin, entities));
    const EnsembleScorer scorer(members);
    const std::uint64_t seed = cfg.seed + index;
    const auto rec = decode_one(cfg, dp.strategy, scorer, tok, entities, in.vocab, seed,
                                dp.temperature, dp.top_k, dp.top_p, dp.groups, dp.lambda_div);
    json record;
    record["id"] = d.id;
    json context = json::array();
    for (std::size_t t = 0; t + 1 < d.turns.size(); ++t)
      context.push_back({{"speaker", to_string(d.turns[t].speaker)},
                         {"text", d.turns[t].text},
                         {"entities", d.turns[t].entities}});
    record["context"] = context;
    record["predicted_entities"] = entities;
    record["strategy"] = dp.strategy;
    record["params"] = {{"beam_width", cfg.edbs.beam_width},
                        {"max_steps", cfg.edbs.max_steps},
                        {"temperature", dp.temperature},
                        {"top_k", dp.top_k},
                        {"top_p", dp.top_p},
                        {"groups", dp.groups},
                        {"lambda_div", dp.lambda_div}};
    record["seed"] = seed;
    record["response"] = rec.response;
    record["candidates"] = rec.candidates;
    if (!rec.revision_report.is_null()) record["revision_report"] = rec.revision_report;
    record["reference"] = d.turns.back().text;
    record["gold_entities"] = d.turns.back().entities;
    os << record.dump() << "\n";
    ++index;
  }
  write_artifact(cfg, cfg.paths.decode_output, os.str());
  std::cout << "decoded " << index << " dialogues with strategy " << dp.strategy << " to "
            << cfg.paths.decode_output << "\n";
  return 0;
}

int cmd_evaluate(const PipelineConfig& cfg) {
  const EntityVocabulary vocab = EntityVocabulary::load(cfg.paths.vocab);
  std::ifstream in(cfg.paths.decode_output);
  if (!in) throw std::runtime_error("cannot read decode output: " + cfg.paths.decode_output);
  std::vector<std::string> outputs, references;
  std::vector<std::vector<std::string>> gold;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("decode output line " + std::to_string(lineno) + ": " + e.what());
    }
    outputs.push_back(j.at("response").get<std::string>());
    references.push_back(j.at("reference").get<std::string>());
    gold.push_back(j.at("gold_entities").get<std::vector<std::string>>());
  }
  const auto rep = evaluate_corpus(outputs, references, gold, vocab);
  write_artifact(cfg, cfg.paths.report, rep.to_json().dump(2) + "\n");
  std::cout << render_report_table({{"decode_output", rep}});
  return 0;
}

int cmd_compare_decoders(const PipelineConfig& cfg, const DecodeParams& dp) {
  const auto in = load_inputs(cfg);
  const auto models = load_generator_models(cfg.paths.generator_model);
  std::unique_ptr<EntityPredictor> predictor;
  if (cfg.generator.entity_source == EntitySource::predicted)
    predictor = std::make_unique<EntityPredictor>(load_entity_predictor(cfg));
  const Tokenizer& tok = models[0].tok;

  static const std::vector<std::pair<std::string, std::string>> kStrategies = {
      {"Greedy", "greedy"},           {"Top-k Sampling", "top_k"},
      {"Top-p Sampling", "top_p"},    {"Multinomial Sampling", "multinomial"},
      {"Beam Search", "beam"},        {"Diverse Beam Search", "dbs"},
      {"EDBS", "edbs"}};

  std::vector<std::string> references;
  std::vector<std::vector<std::string>> gold;
  std::vector<std::vector<std::string>> outputs(kStrategies.size());

  std::size_t index = 0;
  for (const auto& d : in.corpus) {
    if (d.turns.size() < 2 || d.turns.back().speaker != Speaker::doctor) continue;
    const auto lin =
        linearize_dialogue(d, tok, d.turns.size() - 1, cfg.entity.include_history_entities);
    const auto entities = conditioning_entities(cfg, predictor.get(), d, in.vocab);
    // one scorer per dialogue, shared by every strategy; only the strategy
    // (and its private rng stream) varies
    std::vector<std::shared_ptr<TokenScorer>> members;
    for (const auto& m : models)
      members.push_back(std::make_shared<GeneratorScorer>(m, lin, entities));
    const EnsembleScorer scorer(members);
    const std::uint64_t seed = cfg.seed + index;
    references.push_back(d.turns.back().text);
    gold.push_back(d.turns.back().entities);
    for (std::size_t s = 0; s < kStrategies.size(); ++s)
      outputs[s].push_back(decode_one(cfg, kStrategies[s].second, scorer, tok, entities,
                                      in.vocab, seed, dp.temperature, dp.top_k, dp.top_p,
                                      dp.groups, dp.lambda_div)
                               .response);
    ++index;
  }

  std::vector<std::pair<std::string, EvalReport>> rows;
  json jrep;
  for (std::size_t s = 0; s < kStrategies.size(); ++s) {
    const auto rep = evaluate_corpus(outputs[s], references, gold, in.vocab);
    jrep[kStrategies[s].second] = rep.to_json();
    rows.emplace_back(kStrategies[s].first, rep);
  }
  write_artifact(cfg, cfg.paths.report, jrep.dump(2) + "\n");
  std::cout << render_report_table(rows);
  return 0;
}

int cmd_chat(const PipelineConfig& cfg) {
  const EntityVocabulary vocab = EntityVocabulary::load(cfg.paths.vocab);
  const auto models = load_generator_models(cfg.paths.generator_model);
  std::unique_ptr<EntityPredictor> predictor;
  try {
    predictor = std::make_unique<EntityPredictor>(load_entity_predictor(cfg));
  } catch (const std::exception&) {
    std::cout << "(no entity model found; decoding without entity prediction)\n";
  }
  const Tokenizer& tok = models[0].tok;

  Dialogue history;
  history.id = "chat";
  std::cout << "medgen chat - type a patient message, empty line or EOF to quit\n";
  std::string line;
  std::size_t turn_index = 0;
  while (std::cout << "patient> " << std::flush, std::getline(std::cin, line)) {
    if (line.empty()) break;
    history.turns.push_back({Speaker::patient, line, {}});
    std::vector<std::string> entities;
    if (predictor) {
      // the predictor expects a continuation position; predict for the
      // upcoming doctor turn from the full history so far
      entities = predictor->predict(history, history.turns.size(), vocab,
                                    cfg.entity.include_history_entities);
    }
    const auto lin = linearize_dialogue(history, tok, history.turns.size(),
                                        cfg.entity.include_history_entities);
    std::vector<std::shared_ptr<TokenScorer>> members;
    for (const auto& m : models)
      members.push_back(std::make_shared<GeneratorScorer>(m, lin, entities));
    const EnsembleScorer scorer(members);
    EDBSConfig ecfg = cfg.edbs;
    ecfg.seed = cfg.seed + turn_index;
    const auto out = edbs(scorer, tok, entities, vocab, ecfg);
    std::cout << "doctor> " << out.response << "\n";
    if (!entities.empty()) {
      std::cout << "  predicted entities:";
      for (const auto& e : entities) std::cout << " " << e;
      std::cout << "\n";
    }
    for (const auto& c : out.candidates) {
      if (c.revised_text != out.response) continue;
      for (const auto& del : c.report.deleted)
        std::cout << "  deleted: " << del.sentence << " (mention " << del.offending_mention
                  << ", distance " << del.min_distance << ")\n";
      if (!c.report.augmented.empty()) {
        std::cout << "  augmented:";
        for (const auto& e : c.report.augmented) std::cout << " " << e;
        std::cout << "\n";
      }
      break;
    }
    const auto detected = match_entities(out.response, vocab).entities;
    history.turns.push_back({Speaker::doctor, out.response, detected});
    ++turn_index;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"medgen: entity-aware medical dialogue generation pipeline"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus and vocabulary");
  auto* stats = app.add_subcommand("stats", "print corpus statistics");
  auto* train_entity = app.add_subcommand("train-entity", "train the entity predictor");
  auto* search_th = app.add_subcommand("search-thresholds",
                                       "re-run the per-class threshold grid search");
  auto* train_gen = app.add_subcommand("train-gen", "train the fusion generator");
  auto* decode = app.add_subcommand("decode", "decode responses for a corpus");
  auto* evaluate = app.add_subcommand("evaluate", "score a decode output file");
  auto* compare = app.add_subcommand("compare-decoders",
                                     "decode with every strategy and tabulate scores");
  auto* chat = app.add_subcommand("chat", "interactive patient/doctor REPL");

  std::map<CLI::App*, std::shared_ptr<CommandContext>> contexts;
  for (auto* sub : {synth, stats, train_entity, search_th, train_gen, decode, evaluate,
                    compare, chat})
    contexts[sub] = register_common(sub);

  DecodeParams dp;
  for (auto* sub : {decode, compare}) {
    sub->add_option("--strategy", dp.strategy,
                    "greedy|top_k|top_p|multinomial|beam|dbs|edbs");
    sub->add_option("--temperature", dp.temperature, "sampling temperature");
    sub->add_option("--top-k", dp.top_k, "top-k sampling cutoff");
    sub->add_option("--top-p", dp.top_p, "top-p nucleus mass");
    sub->add_option("--groups", dp.groups, "diverse beam search group count");
    sub->add_option("--lambda-div", dp.lambda_div, "diverse beam search penalty");
  }

  CLI11_PARSE(app, argc, argv);

  try {
    auto* sub = app.get_subcommands().front();
    const PipelineConfig cfg = contexts.at(sub)->resolve();
    if (sub == synth) return cmd_synth(cfg);
    if (sub == stats) return cmd_stats(cfg);
    if (sub == train_entity) return cmd_train_entity(cfg);
    if (sub == search_th) return cmd_search_thresholds(cfg);
    if (sub == train_gen) return cmd_train_gen(cfg);
    if (sub == decode) return cmd_decode(cfg, dp);
    if (sub == evaluate) return cmd_evaluate(cfg);
    if (sub == compare) return cmd_compare_decoders(cfg, dp);
    if (sub == chat) return cmd_chat(cfg);
    throw std::logic_error("unhandled subcommand");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

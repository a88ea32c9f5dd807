#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "medgen/corpus.hpp"
#include "medgen/entity_predictor.hpp"
#include "medgen/nn.hpp"

namespace medgen {

enum class SelfTerm { o_prev, e_prev };

struct LossWeights {
  double mu = 1.0, nu = 1.0, lambda = 1.0;

  void validate() const {
    if (mu < 0 || nu < 0 || lambda < 0)
      throw std::invalid_argument("loss weights must be non-negative");
  }
};

struct FusionConfig {
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t enc_blocks = 2;
  std::size_t dec_blocks = 2;
  std::size_t max_len = 512;
  std::size_t lm_window = 8;
  SelfTerm self_term = SelfTerm::o_prev;
  LossWeights weights;
};

struct FusionBlockTrace {
  ag::Var o_ent, o_c, o_prev, self_term, o_avg;
};

struct FusionDecodeOut {
  ag::Var logits;                       // prefix_len x vocab
  std::vector<FusionBlockTrace> trace;  // one per decoder block
};

// Entity-aware encoder-decoder with the three-way cross-attention fusion.
class FusionModel {
 public:
  FusionConfig cfg;
  Tokenizer tok;
  std::size_t n_classes = 0;
  std::size_t domain_count = 0;
  ParamStore params;

  static FusionModel create(const FusionConfig& cfg, const Tokenizer& tok,
                            std::size_t n_classes, std::size_t domain_count, Rng& rng) {
    FusionModel m;
    m.cfg = cfg;
    m.tok = tok;
    m.n_classes = n_classes;
    m.domain_count = domain_count;
    const std::size_t d = cfg.dim;
    const double s = 1.0 / std::sqrt(double(d));
    const int bottom = int(cfg.enc_blocks + cfg.dec_blocks);
    auto& ps = m.params;
    ps.add("embed.token", gaussian_init({tok.size(), d}, 0.1, rng), bottom);
    ps.add("embed.pos", gaussian_init({cfg.max_len, d}, 0.1, rng), bottom);
    ps.add("entch.w1", gaussian_init({d, d}, s, rng), bottom);
    ps.add("entch.b1", Tensor::matrix(1, d), bottom);
    ps.add("entch.w2", gaussian_init({d, d}, s, rng), bottom);
    ps.add("entch.b2", Tensor::matrix(1, d), bottom);
    auto add_block = [&](const std::string& p, int depth, std::size_t n_attn) {
      static const char* names[] = {"self", "cc", "ce"};
      for (std::size_t a = 0; a < n_attn; ++a)
        MmcaLayer::create(ps, p + "." + names[a], d, cfg.heads, depth, rng);
      ps.add(p + ".w1", gaussian_init({d, d}, s, rng), depth);
      ps.add(p + ".b1", Tensor::matrix(1, d), depth);
      ps.add(p + ".w2", gaussian_init({d, d}, s, rng), depth);
      ps.add(p + ".b2", Tensor::matrix(1, d), depth);
    };
    for (std::size_t b = 0; b < cfg.enc_blocks; ++b) {
      const int depth = int(cfg.enc_blocks + cfg.dec_blocks - b);
      add_block("enc" + std::to_string(b), depth, 1);
      add_block("eenc" + std::to_string(b), depth, 1);
    }
    for (std::size_t b = 0; b < cfg.dec_blocks; ++b)
      add_block("dec" + std::to_string(b), int(cfg.dec_blocks - b), 3);
    ps.add("out.w", gaussian_init({d, tok.size()}, s, rng), 0);
    ps.add("out.b", Tensor::matrix(1, tok.size()), 0);
    ps.add("head5.w", gaussian_init({d, domain_count}, s, rng), 0);
    ps.add("head5.b", Tensor::matrix(1, domain_count), 0);
    ps.add("head160.w", gaussian_init({d, n_classes}, s, rng), 0);
    ps.add("head160.b", Tensor::matrix(1, n_classes), 0);
    return m;
  }

  // ---- context embedding (token + position + entity channel) ----

  ag::Var context_embedding(const LinearizedInput& input) const {
    const std::size_t n = input.tokens.size();
    if (n > cfg.max_len) throw std::invalid_argument("context longer than max_len");
    std::vector<std::size_t> ids(input.tokens.begin(), input.tokens.end());
    std::vector<std::size_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = i;
    auto table = params.get("embed.token");
    auto base = ag::add(ag::gather_rows(table, ids), ag::gather_rows(params.get("embed.pos"), pos));

    // Entity channel: one row per sentence span, broadcast over the span.
    // Positions outside every span carry a zero channel.
    std::vector<ag::Var> channel_rows;  // segments to concat, in position order
    std::size_t cursor = 0;
    auto zeros_segment = [&](std::size_t count) {
      return ag::constant(Tensor::matrix(count, cfg.dim));
    };
    auto repeat = [&](const ag::Var& row, std::size_t count) {
      return ag::matmul(ag::constant(Tensor({count, 1}, 1.0)), row);
    };
    for (std::size_t s = 0; s < input.sentence_spans.size(); ++s) {
      const auto [start, end] = input.sentence_spans[s];
      if (start >= end) throw std::invalid_argument("context embedding: zero-length sentence span");
      if (start > cursor) channel_rows.push_back(zeros_segment(start - cursor));
      ag::Var row;
      if (s < input.sentence_entities.size() && !input.sentence_entities[s].empty()) {
        // Ent_k: two-layer perception over the sentence's entity token embeddings.
        std::vector<std::size_t> ent_ids;
        for (const auto& e : input.sentence_entities[s])
          for (int id : tok.encode(e)) ent_ids.push_back(std::size_t(id));
        auto pooled = ag::mean_rows(ag::gather_rows(table, ent_ids));
        auto h = ag::tanh(ag::add_row(ag::matmul(pooled, params.get("entch.w1")),
                                      params.get("entch.b1")));
        row = ag::add_row(ag::matmul(h, params.get("entch.w2")), params.get("entch.b2"));
      } else {
        // E_avg: mean token embedding of the sentence itself.
        std::vector<std::size_t> span_ids(ids.begin() + start, ids.begin() + end);
        row = ag::mean_rows(ag::gather_rows(table, span_ids));
      }
      channel_rows.push_back(repeat(row, end - start));
      cursor = end;
    }
    if (cursor < n) channel_rows.push_back(zeros_segment(n - cursor));
    return ag::add(base, ag::concat_rows(channel_rows));
  }

  // ---- encoders ----

  ag::Var encoder_stack(const std::string& prefix, ag::Var x, std::size_t blocks) const {
    const Mask mask = full_mask(x->value.rows(), x->value.rows());
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::string p = prefix + std::to_string(b);
      auto attn = MmcaLayer::from_store(params, p + ".self", cfg.heads);
      x = ag::add(x, attn.apply(x, x, x, mask));
      auto h = ag::tanh(ag::add_row(ag::matmul(x, params.get(p + ".w1")), params.get(p + ".b1")));
      x = ag::add(x, ag::add_row(ag::matmul(h, params.get(p + ".w2")), params.get(p + ".b2")));
    }
    return x;
  }

  ag::Var encode_context(const LinearizedInput& input) const {
    return encoder_stack("enc", context_embedding(input), cfg.enc_blocks);
  }

  // Canonical (sorted) entity order, each entity followed by [SEP]; the
  // empty set is a single [SEP].
  std::vector<int> entity_token_stream(const std::vector<std::string>& entities) const {
    std::set<std::string> sorted(entities.begin(), entities.end());
    std::vector<int> stream;
    for (const auto& e : sorted) {
      for (int id : tok.encode(e)) stream.push_back(id);
      stream.push_back(Tokenizer::kSep);
    }
    if (stream.empty()) stream.push_back(Tokenizer::kSep);
    return stream;
  }

  ag::Var embed_tokens(const std::vector<int>& tokens) const {
    if (tokens.size() > cfg.max_len) throw std::invalid_argument("sequence longer than max_len");
    std::vector<std::size_t> ids(tokens.begin(), tokens.end());
    std::vector<std::size_t> pos(tokens.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    return ag::add(ag::gather_rows(params.get("embed.token"), ids),
                   ag::gather_rows(params.get("embed.pos"), pos));
  }

  ag::Var encode_entities(const std::vector<std::string>& entities) const {
    return encoder_stack("eenc", embed_tokens(entity_token_stream(entities)), cfg.enc_blocks);
  }

  // ---- fusion decoding ----

  // O_ent = MMCA[E_prev, E_ent, E_ent]; O_C = MMCA[E_prev, E_C, E_C];
  // O_prev = causal MMCA[E_prev, E_prev, E_prev]; O_avg averages the three
  // with the configured self term.
  FusionDecodeOut fusion_decode(const ag::Var& e_c, const ag::Var& e_ent,
                                const std::vector<int>& prefix) const {
    if (prefix.empty()) throw std::invalid_argument("fusion_decode: prefix must start with [BOS]");
    if (e_c->value.rows() == 0) throw std::invalid_argument("fusion_decode: empty context encoding");
    const std::size_t n = prefix.size();
    auto x = embed_tokens(prefix);
    const Mask causal = causal_mask(n);
    const Mask cross_c = full_mask(n, e_c->value.rows());
    const Mask cross_e = full_mask(n, e_ent->value.rows());
    FusionDecodeOut out;
    for (std::size_t b = 0; b < cfg.dec_blocks; ++b) {
      const std::string p = "dec" + std::to_string(b);
      FusionBlockTrace tr;
      tr.o_prev = MmcaLayer::from_store(params, p + ".self", cfg.heads).apply(x, x, x, causal);
      tr.o_c = MmcaLayer::from_store(params, p + ".cc", cfg.heads).apply(x, e_c, e_c, cross_c);
      tr.o_ent = MmcaLayer::from_store(params, p + ".ce", cfg.heads).apply(x, e_ent, e_ent, cross_e);
      tr.self_term = cfg.self_term == SelfTerm::o_prev ? tr.o_prev : x;
      tr.o_avg = ag::scale(ag::add(ag::add(tr.o_ent, tr.o_c), tr.self_term), 1.0 / 3.0);
      x = tr.o_avg;
      auto h = ag::tanh(ag::add_row(ag::matmul(x, params.get(p + ".w1")), params.get(p + ".b1")));
      x = ag::add(x, ag::add_row(ag::matmul(h, params.get(p + ".w2")), params.get(p + ".b2")));
      out.trace.push_back(std::move(tr));
    }
    out.logits = ag::add_row(ag::matmul(x, params.get("out.w")), params.get("out.b"));
    return out;
  }

  // Decoder stack in self-only mode with a k-window causal mask.
  ag::Var self_only_logits(const std::vector<int>& tokens, std::size_t window) const {
    if (window < 1) throw std::invalid_argument("lm window must be >= 1");
    auto x = embed_tokens(tokens);
    const Mask mask = window_mask(tokens.size(), window);
    for (std::size_t b = 0; b < cfg.dec_blocks; ++b) {
      const std::string p = "dec" + std::to_string(b);
      x = MmcaLayer::from_store(params, p + ".self", cfg.heads).apply(x, x, x, mask);
      auto h = ag::tanh(ag::add_row(ag::matmul(x, params.get(p + ".w1")), params.get(p + ".b1")));
      x = ag::add(x, ag::add_row(ag::matmul(h, params.get(p + ".w2")), params.get(p + ".b2")));
    }
    return ag::add_row(ag::matmul(x, params.get("out.w")), params.get("out.b"));
  }
};

// ---- losses ----

// -sum_i log P(y_i | prefix): token-level NLL over the target.
inline ag::Var generation_loss(const ag::Var& logits, const std::vector<int>& targets) {
  if (logits->value.rows() != targets.size())
    throw std::invalid_argument("generation_loss: length mismatch");
  return ag::nll_from_logits(logits, std::vector<std::size_t>(targets.begin(), targets.end()));
}

// -sum_i log P(x_i | x_{i-k}..x_{i-1}) on the decoder stack in self-only mode.
inline ag::Var lm_loss(const FusionModel& model, const std::vector<int>& tokens,
                       std::size_t window) {
  if (tokens.size() < 2) throw std::invalid_argument("lm_loss: sequence length must be > 1");
  std::vector<int> inputs(tokens.begin(), tokens.end() - 1);
  auto logits = model.self_only_logits(inputs, window);
  std::vector<std::size_t> targets(tokens.begin() + 1, tokens.end());
  return ag::nll_from_logits(logits, targets);
}

enum class TypeLevel { domain5, entity160 };

// Multi-label BCE (summed over classes) on a per-level head over mean-pooled O_C.
inline ag::Var hierarchical_type_loss(const FusionModel& model, const ag::Var& o_c,
                                      const std::vector<double>& targets, TypeLevel level) {
  const std::string head = level == TypeLevel::domain5 ? "head5" : "head160";
  auto pooled = ag::mean_rows(o_c);
  auto logits = ag::add_row(ag::matmul(pooled, model.params.get(head + ".w")),
                            model.params.get(head + ".b"));
  const std::size_t k = targets.size();
  if (logits->value.size() != k)
    throw std::invalid_argument("hierarchical_type_loss: target width mismatch");
  std::vector<double> unit(k, 1.0);
  return ag::scale(ag::weighted_bce_from_logits(logits, targets, unit), double(k));
}

inline ag::Var total_loss(const ag::Var& l_d, const ag::Var& l_lm, const ag::Var& l_t5,
                          const ag::Var& l_t160, const LossWeights& w) {
  w.validate();
  return ag::sum({l_d, ag::scale(l_lm, w.mu), ag::scale(l_t5, w.nu),
                  ag::scale(l_t160, w.lambda)});
}

// ---- per-example loss assembly ----

struct GeneratorExample {
  LinearizedInput context;
  std::vector<std::string> entities;     // conditioning entity set
  std::vector<int> target;               // response chars + [EOS]
  std::vector<double> targets160;        // 0/1 over entity classes
  std::vector<double> targets5;          // 0/1 over domain types
};

inline GeneratorExample build_generator_example(const Dialogue& d, const EntityVocabulary& vocab,
                                                const Tokenizer& tok,
                                                bool include_history_entities) {
  if (d.turns.size() < 2 || d.turns.back().speaker != Speaker::doctor)
    throw ValidationError("dialogue " + d.id + " lacks a doctor response turn");
  GeneratorExample ex;
  ex.context = linearize_dialogue(d, tok, d.turns.size() - 1, include_history_entities);
  ex.entities = d.turns.back().entities;
  ex.target = tok.encode(d.turns.back().text);
  ex.target.push_back(Tokenizer::kEos);
  ex.targets160.assign(vocab.size(), 0.0);
  ex.targets5.assign(vocab.domain_count(), 0.0);
  for (const auto& e : ex.entities) {
    ex.targets160[vocab.index_of(e)] = 1.0;
    ex.targets5[std::size_t(vocab.domain_of(e))] = 1.0;
  }
  return ex;
}

struct ExampleLoss {
  ag::Var total, l_d, l_lm, l_t5, l_t160;
};

inline ExampleLoss example_loss(const FusionModel& model, const GeneratorExample& ex) {
  auto e_c = model.encode_context(ex.context);
  auto e_ent = model.encode_entities(ex.entities);
  std::vector<int> prefix;
  prefix.push_back(Tokenizer::kBos);
  prefix.insert(prefix.end(), ex.target.begin(), ex.target.end() - 1);
  auto dec = model.fusion_decode(e_c, e_ent, prefix);
  ExampleLoss out;
  out.l_d = generation_loss(dec.logits, ex.target);
  std::vector<int> lm_seq;
  lm_seq.push_back(Tokenizer::kBos);
  lm_seq.insert(lm_seq.end(), ex.target.begin(), ex.target.end());
  out.l_lm = lm_loss(model, lm_seq, model.cfg.lm_window);
  const auto& o_c = dec.trace.back().o_c;
  out.l_t5 = hierarchical_type_loss(model, o_c, ex.targets5, TypeLevel::domain5);
  out.l_t160 = hierarchical_type_loss(model, o_c, ex.targets160, TypeLevel::entity160);
  out.total = total_loss(out.l_d, out.l_lm, out.l_t5, out.l_t160, model.cfg.weights);
  return out;
}

// ---- training ----

struct StageConfig {
  std::size_t epochs = 2;
  std::size_t filter_min_entities = 0;  // keep dialogues with count > this
};

enum class EntitySource { gold, predicted };

struct GenTrainConfig {
  FusionConfig model;
  OptimizerConfig opt{0.01, 1.0, 0.999, 0.0};
  std::vector<StageConfig> stages{{2, 0}};
  std::size_t folds = 1;
  EntitySource entity_source = EntitySource::gold;
  bool use_ema = false;
  bool include_history_entities = true;
  std::uint64_t seed = 0;
};

struct GenTrainReport {
  std::vector<double> epoch_losses;  // across all stages, in order
};

using EntityPredictFn =
    std::function<std::vector<std::string>(const Dialogue&, std::size_t upto_turn)>;

inline FusionModel train_generator_single(const Corpus& corpus, const EntityVocabulary& vocab,
                                          const Tokenizer& tok, const GenTrainConfig& cfg,
                                          GenTrainReport* report = nullptr,
                                          const EntityPredictFn& predict = {}) {
  if (corpus.empty()) throw std::invalid_argument("train_generator: empty corpus");
  Rng rng(cfg.seed);
  FusionModel model = FusionModel::create(cfg.model, tok, vocab.size(), vocab.domain_count(), rng);
  for (const auto& stage : cfg.stages) {
    Corpus stage_corpus = filter_by_entity_count(corpus, stage.filter_min_entities);
    if (stage_corpus.empty()) continue;
    std::vector<GeneratorExample> examples;
    for (const auto& d : stage_corpus) {
      if (d.turns.back().speaker != Speaker::doctor) continue;
      auto ex = build_generator_example(d, vocab, tok, cfg.include_history_entities);
      if (cfg.entity_source == EntitySource::predicted && predict)
        ex.entities = predict(d, d.turns.size() - 1);
      examples.push_back(std::move(ex));
    }
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t epoch = 0; epoch < stage.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      double epoch_loss = 0.0;
      for (std::size_t idx : order) {
        model.params.zero_grad();
        auto loss = example_loss(model, examples[idx]);
        if (!std::isfinite(loss.total->value[0]))
          throw std::runtime_error("train_generator: diverged (non-finite loss)");
        epoch_loss += loss.total->value[0];
        ag::backward(loss.total);
        optimizer_step(model.params, cfg.opt);
      }
      if (report) report->epoch_losses.push_back(epoch_loss / double(examples.size()));
    }
  }
  if (cfg.use_ema) model.params.adopt_shadow();
  return model;
}

struct FoldResult {
  std::vector<FusionModel> models;                 // one per fold
  std::vector<std::vector<std::size_t>> val_folds; // dialogue indices, disjoint
};

// K-fold training: model f trains on everything outside fold f, starting
// fresh and running the full stage schedule.
inline FoldResult train_generator_folds(const Corpus& corpus, const EntityVocabulary& vocab,
                                        const Tokenizer& tok, const GenTrainConfig& cfg,
                                        const EntityPredictFn& predict = {}) {
  if (cfg.folds < 1) throw std::invalid_argument("train_generator: folds must be >= 1");
  FoldResult out;
  if (cfg.folds == 1) {
    out.models.push_back(train_generator_single(corpus, vocab, tok, cfg, nullptr, predict));
    out.val_folds.push_back({});
    return out;
  }
  out.val_folds.assign(cfg.folds, {});
  for (std::size_t i = 0; i < corpus.size(); ++i) out.val_folds[i % cfg.folds].push_back(i);
  for (std::size_t f = 0; f < cfg.folds; ++f) {
    Corpus train_split;
    std::set<std::size_t> held(out.val_folds[f].begin(), out.val_folds[f].end());
    for (std::size_t i = 0; i < corpus.size(); ++i)
      if (!held.count(i)) train_split.push_back(corpus[i]);
    GenTrainConfig fold_cfg = cfg;
    fold_cfg.seed = cfg.seed + f;
    out.models.push_back(
        train_generator_single(train_split, vocab, tok, fold_cfg, nullptr, predict));
  }
  return out;
}

}  // namespace medgen

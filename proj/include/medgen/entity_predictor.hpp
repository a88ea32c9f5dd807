#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "medgen/corpus.hpp"
#include "medgen/nn.hpp"

namespace medgen {

// ---- thresholds ----

struct ThresholdVector {
  std::vector<double> thresholds;
  std::vector<double> weights;

  nlohmann::json to_json() const { return {{"thresholds", thresholds}, {"weights", weights}}; }

  static ThresholdVector from_json(const nlohmann::json& j) {
    ThresholdVector t;
    t.thresholds = j.at("thresholds").get<std::vector<double>>();
    t.weights = j.at("weights").get<std::vector<double>>();
    return t;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write thresholds: " + path);
    out << to_json().dump() << "\n";
  }

  static ThresholdVector load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read thresholds: " + path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
  }
};

struct BinaryCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

inline double f1_from_binary(const BinaryCounts& c) {
  const double denom = double(2 * c.tp + c.fp + c.fn);
  return denom > 0.0 ? 2.0 * double(c.tp) / denom : 0.0;
}

// F1 of one class at one threshold under the strict score > threshold rule.
inline double class_f1_at_threshold(const std::vector<double>& scores,
                                    const std::vector<int>& labels, double threshold) {
  BinaryCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] > threshold;
    if (pred && labels[i]) ++c.tp;
    else if (pred) ++c.fp;
    else if (labels[i]) ++c.fn;
  }
  return f1_from_binary(c);
}

// Per-class grid search over [lo, hi] (endpoints inclusive). Ties break
// toward the smallest threshold; all-negative classes get threshold hi.
inline ThresholdVector search_thresholds(const std::vector<std::vector<double>>& scores,
                                         const std::vector<std::vector<int>>& labels,
                                         double lo = 0.3, double hi = 0.6,
                                         double step = 0.001) {
  if (scores.empty() || labels.size() != scores.size())
    throw std::invalid_argument("search_thresholds: empty or misaligned matrices");
  if (!(lo < hi) || step <= 0.0) throw std::invalid_argument("search_thresholds: bad grid");
  const std::size_t n = scores.size();
  const std::size_t k = scores[0].size();
  const std::size_t grid_points = std::size_t(std::round((hi - lo) / step)) + 1;

  ThresholdVector out;
  out.thresholds.resize(k);
  out.weights.assign(k, 1.0);
  std::vector<double> col_scores(n);
  std::vector<int> col_labels(n);
  for (std::size_t c = 0; c < k; ++c) {
    bool any_pos = false;
    for (std::size_t i = 0; i < n; ++i) {
      col_scores[i] = scores[i][c];
      col_labels[i] = labels[i][c];
      any_pos = any_pos || labels[i][c];
    }
    if (!any_pos) {
      out.thresholds[c] = hi;
      continue;
    }
    double best_f1 = -1.0, best_th = lo;
    for (std::size_t g = 0; g < grid_points; ++g) {
      const double th = std::min(hi, lo + double(g) * step);
      const double f1 = class_f1_at_threshold(col_scores, col_labels, th);
      if (f1 > best_f1) {
        best_f1 = f1;
        best_th = th;
      }
    }
    out.thresholds[c] = best_th;
  }
  return out;
}

// Entity k is selected iff score_k > threshold_k (strict).
inline std::vector<std::size_t> apply_thresholds(const std::vector<double>& scores,
                                                 const ThresholdVector& th) {
  if (scores.size() != th.thresholds.size())
    throw std::invalid_argument("apply_thresholds: length mismatch");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > th.thresholds[i]) out.push_back(i);
  return out;
}

enum class F1Mode { micro, macro };

struct MultilabelScore {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

inline MultilabelScore multilabel_f1(const std::vector<std::vector<std::size_t>>& pred,
                                     const std::vector<std::vector<std::size_t>>& gold,
                                     std::size_t n_classes, F1Mode mode) {
  if (pred.size() != gold.size())
    throw std::invalid_argument("multilabel_f1: example count mismatch");
  std::vector<BinaryCounts> per_class(n_classes);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::set<std::size_t> p(pred[i].begin(), pred[i].end());
    const std::set<std::size_t> g(gold[i].begin(), gold[i].end());
    for (std::size_t c : p) (g.count(c) ? per_class[c].tp : per_class[c].fp)++;
    for (std::size_t c : g)
      if (!p.count(c)) ++per_class[c].fn;
  }
  MultilabelScore out;
  if (mode == F1Mode::micro) {
    BinaryCounts pooled;
    for (const auto& c : per_class) {
      pooled.tp += c.tp;
      pooled.fp += c.fp;
      pooled.fn += c.fn;
    }
    out.precision = (pooled.tp + pooled.fp) ? double(pooled.tp) / double(pooled.tp + pooled.fp) : 0.0;
    out.recall = (pooled.tp + pooled.fn) ? double(pooled.tp) / double(pooled.tp + pooled.fn) : 0.0;
    out.f1 = (out.precision + out.recall) > 0.0
                 ? 2.0 * out.precision * out.recall / (out.precision + out.recall)
                 : 0.0;
  } else {
    for (const auto& c : per_class) out.f1 += f1_from_binary(c) / double(n_classes);
  }
  return out;
}

// Inverse class frequency on the training labels, normalized to mean 1.
inline std::vector<double> inverse_frequency_weights(const std::vector<std::vector<int>>& labels,
                                                     std::size_t n_classes) {
  std::vector<double> counts(n_classes, 0.0);
  for (const auto& row : labels)
    for (std::size_t c = 0; c < n_classes; ++c) counts[c] += row[c];
  std::vector<double> w(n_classes);
  double sum = 0.0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    w[c] = 1.0 / std::max(1.0, counts[c]);
    sum += w[c];
  }
  for (auto& v : w) v *= double(n_classes) / sum;
  return w;
}

// Plain-value weighted BCE over pre-sigmoid logits (see Eq.-style contract
// in weighted_bce_from_logits, which this mirrors).
inline double weighted_bce_loss(const std::vector<double>& logits,
                                const std::vector<double>& targets,
                                const std::vector<double>& weights) {
  auto v = ag::constant(Tensor({logits.size()}, logits));
  return ag::weighted_bce_from_logits(v, targets, weights)->value[0];
}

// ---- scorer model ----

struct EntityScorerConfig {
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t blocks = 3;  // "last three layers" is the whole stack
  std::size_t max_len = 512;
  std::size_t msd_samples = 4;
  double msd_p = 0.1;
};

// Toy encoder (stacked self-attention blocks), concatenated per-layer [CLS]
// features, attention pooling across layers, multi-sample-dropout head,
// sigmoid output of width |entity vocabulary|.
class EntityScorer {
 public:
  EntityScorerConfig cfg;
  std::size_t n_classes = 0;
  ParamStore params;

  struct Block {
    MmcaLayer attn;
    ag::Var w1, b1, w2, b2;
  };

  static EntityScorer create(const EntityScorerConfig& cfg, std::size_t token_vocab,
                             std::size_t n_classes, Rng& rng) {
    EntityScorer m;
    m.cfg = cfg;
    m.n_classes = n_classes;
    const std::size_t d = cfg.dim;
    const double s = 1.0 / std::sqrt(double(d));
    const int bottom = int(cfg.blocks);
    m.params.add("embed.token", gaussian_init({token_vocab, d}, 0.1, rng), bottom);
    m.params.add("embed.pos", gaussian_init({cfg.max_len, d}, 0.1, rng), bottom);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      const std::string p = "block" + std::to_string(b);
      const int depth = int(cfg.blocks - b);  // lower blocks learn slower
      MmcaLayer::create(m.params, p + ".attn", d, cfg.heads, depth, rng);
      m.params.add(p + ".w1", gaussian_init({d, d}, s, rng), depth);
      m.params.add(p + ".b1", Tensor::matrix(1, d), depth);
      m.params.add(p + ".w2", gaussian_init({d, d}, s, rng), depth);
      m.params.add(p + ".b2", Tensor::matrix(1, d), depth);
    }
    m.params.add("pool.w", gaussian_init({d, d}, s, rng), 0);
    m.params.add("pool.u", gaussian_init({d, 1}, s, rng), 0);
    m.params.add("head.w", gaussian_init({d, n_classes}, s, rng), 0);
    m.params.add("head.b", Tensor::matrix(1, n_classes), 0);
    return m;
  }

  // Pre-sigmoid logits for one linearized input.
  ag::Var forward_logits(const LinearizedInput& input, RunMode mode, Rng& rng) const {
    if (input.tokens.size() > cfg.max_len)
      throw std::invalid_argument("entity scorer: sequence longer than max_len");
    const std::size_t n = input.tokens.size();
    std::vector<std::size_t> ids(input.tokens.begin(), input.tokens.end());
    std::vector<std::size_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = i;
    auto x = ag::add(ag::gather_rows(params.get("embed.token"), ids),
                     ag::gather_rows(params.get("embed.pos"), pos));
    const Mask mask = full_mask(n, n);
    std::vector<ag::Var> cls_rows;
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      const std::string p = "block" + std::to_string(b);
      auto attn = MmcaLayer::from_store(params, p + ".attn", cfg.heads);
      x = ag::add(x, attn.apply(x, x, x, mask));
      auto h = ag::tanh(ag::add_row(ag::matmul(x, params.get(p + ".w1")), params.get(p + ".b1")));
      x = ag::add(x, ag::add_row(ag::matmul(h, params.get(p + ".w2")), params.get(p + ".b2")));
      cls_rows.push_back(ag::slice_rows(x, 0, 1));  // [CLS] feature of this layer
    }
    // Attention pooling across the last-three-layer [CLS] features.
    auto stacked = ag::concat_rows(cls_rows);
    auto scores = ag::matmul(ag::tanh(ag::matmul(stacked, params.get("pool.w"))),
                             params.get("pool.u"));
    auto alpha = ag::masked_softmax_rows(ag::transpose(scores), full_mask(1, cls_rows.size()));
    auto pooled = ag::matmul(alpha, stacked);
    auto head = [this](const ag::Var& h) {
      return ag::add_row(ag::matmul(h, params.get("head.w")), params.get("head.b"));
    };
    return multi_sample_dropout(pooled, cfg.msd_samples, cfg.msd_p, head, mode, rng);
  }

  // Per-entity probabilities, deterministic (eval mode).
  std::vector<double> predict_scores(const LinearizedInput& input) const {
    Rng rng(0);
    auto logits = forward_logits(input, RunMode::eval, rng);
    std::vector<double> out(logits->value.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = 1.0 / (1.0 + std::exp(-logits->value[i]));
    return out;
  }
};

// ---- training ----

struct EntityTrainConfig {
  EntityScorerConfig model;
  OptimizerConfig opt;
  std::size_t epochs = 3;
  double val_fraction = 0.2;
  bool use_fgm = true;
  bool use_ema = true;
  bool include_history_entities = true;
  std::uint64_t seed = 0;
};

struct EntityExample {
  LinearizedInput input;
  std::vector<double> targets;       // dense 0/1 over classes
  std::vector<int> labels;           // same, as ints
  std::vector<std::size_t> gold_idx; // sparse class indices
};

// One example per dialogue: history = all turns before the final doctor
// turn, labels = that turn's entity set.
inline std::vector<EntityExample> build_entity_examples(const Corpus& corpus,
                                                        const EntityVocabulary& vocab,
                                                        const Tokenizer& tok,
                                                        bool include_history_entities) {
  std::vector<EntityExample> out;
  for (const auto& d : corpus) {
    if (d.turns.size() < 2 || d.turns.back().speaker != Speaker::doctor) continue;
    EntityExample ex;
    ex.input = linearize_dialogue(d, tok, d.turns.size() - 1, include_history_entities);
    ex.targets.assign(vocab.size(), 0.0);
    ex.labels.assign(vocab.size(), 0);
    for (const auto& e : d.turns.back().entities) {
      const std::size_t idx = vocab.index_of(e);
      ex.targets[idx] = 1.0;
      ex.labels[idx] = 1;
      ex.gold_idx.push_back(idx);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

struct EntityTrainReport {
  std::vector<double> epoch_losses;
  MultilabelScore val_searched;
  MultilabelScore val_uniform_half;
};

struct EntityTrainResult {
  EntityScorer scorer;
  ThresholdVector thresholds;
  EntityTrainReport report;
};

inline EntityTrainResult train_entity_predictor(const Corpus& corpus,
                                                const EntityVocabulary& vocab,
                                                const Tokenizer& tok,
                                                const EntityTrainConfig& cfg) {
  auto examples = build_entity_examples(corpus, vocab, tok, cfg.include_history_entities);
  const std::size_t n_val = std::max<std::size_t>(1, std::size_t(cfg.val_fraction * examples.size()));
  if (examples.size() <= n_val)
    throw std::invalid_argument("train_entity_predictor: not enough examples for a split");
  std::vector<EntityExample> val(examples.end() - n_val, examples.end());
  examples.resize(examples.size() - n_val);

  std::vector<std::vector<int>> train_labels;
  for (const auto& ex : examples) train_labels.push_back(ex.labels);
  const auto weights = inverse_frequency_weights(train_labels, vocab.size());

  Rng rng(cfg.seed);
  EntityScorer scorer = EntityScorer::create(cfg.model, tok.size(), vocab.size(), rng);

  EntityTrainReport report;
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto& token_embed = scorer.params.entries().at("embed.token");
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t idx : order) {
      const auto& ex = examples[idx];
      scorer.params.zero_grad();
      auto loss = ag::weighted_bce_from_logits(
          scorer.forward_logits(ex.input, RunMode::train, rng), ex.targets, weights);
      if (!std::isfinite(loss->value[0]))
        throw std::runtime_error("train_entity_predictor: diverged (non-finite loss)");
      epoch_loss += loss->value[0];
      ag::backward(loss);
      if (cfg.use_fgm && cfg.opt.fgm_epsilon > 0.0) {
        const Tensor saved = token_embed.var->value;
        token_embed.var->value =
            fgm_perturb(saved, token_embed.var->grad, cfg.opt.fgm_epsilon);
        auto adv_loss = ag::weighted_bce_from_logits(
            scorer.forward_logits(ex.input, RunMode::train, rng), ex.targets, weights);
        ag::backward(adv_loss);
        token_embed.var->value = saved;
      }
      optimizer_step(scorer.params, cfg.opt);
    }
    report.epoch_losses.push_back(epoch_loss / double(examples.size()));
  }
  if (cfg.use_ema) scorer.params.adopt_shadow();

  // Threshold search on the validation split.
  std::vector<std::vector<double>> val_scores;
  std::vector<std::vector<int>> val_labels;
  std::vector<std::vector<std::size_t>> val_gold;
  for (const auto& ex : val) {
    val_scores.push_back(scorer.predict_scores(ex.input));
    val_labels.push_back(ex.labels);
    val_gold.push_back(ex.gold_idx);
  }
  ThresholdVector th = search_thresholds(val_scores, val_labels);
  th.weights = weights;

  auto predict_sets = [&](const ThresholdVector& t) {
    std::vector<std::vector<std::size_t>> sets;
    for (const auto& s : val_scores) sets.push_back(apply_thresholds(s, t));
    return sets;
  };
  report.val_searched = multilabel_f1(predict_sets(th), val_gold, vocab.size(), F1Mode::micro);
  ThresholdVector uniform;
  uniform.thresholds.assign(vocab.size(), 0.5);
  uniform.weights.assign(vocab.size(), 1.0);
  report.val_uniform_half =
      multilabel_f1(predict_sets(uniform), val_gold, vocab.size(), F1Mode::micro);

  return {std::move(scorer), std::move(th), std::move(report)};
}

}  // namespace medgen

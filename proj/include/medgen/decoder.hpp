#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "medgen/corpus.hpp"
#include "medgen/scorer.hpp"

namespace medgen {

// Classic unit-cost insert/delete/substitute distance over codepoints.
inline std::size_t levenshtein(const std::string& a, const std::string& b) {
  const std::u32string ua = utf8::decode(a), ub = utf8::decode(b);
  std::vector<std::size_t> prev(ub.size() + 1), cur(ub.size() + 1);
  for (std::size_t j = 0; j <= ub.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= ua.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= ub.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (ua[i - 1] == ub[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[ub.size()];
}

// ---- single-step sampling ----

struct SampleMode {
  enum Kind { greedy, top_k, top_p, multinomial } kind = greedy;
  std::size_t k = 20;
  double p = 0.9;

  static SampleMode Greedy() { return {greedy}; }
  static SampleMode TopK(std::size_t k) { return {top_k, k}; }
  static SampleMode TopP(double p) { return {top_p, 0, p}; }
  static SampleMode Multinomial() { return {multinomial}; }
};

namespace detail {

// Deterministic categorical draw via cumulative sums.
inline std::size_t draw(const std::vector<double>& probs, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = u(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (r < acc) return i;
  }
  return probs.size() - 1;
}

}  // namespace detail

inline int decode_step_sample(const std::vector<double>& logprobs, const SampleMode& mode,
                              double temperature, Rng& rng) {
  if (logprobs.empty()) throw std::invalid_argument("decode_step_sample: empty distribution");
  if (temperature <= 0.0) throw std::invalid_argument("decode_step_sample: temperature > 0");
  std::vector<std::size_t> idx(logprobs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return logprobs[a] > logprobs[b]; });
  if (mode.kind == SampleMode::greedy) return int(idx[0]);

  std::size_t support = logprobs.size();
  if (mode.kind == SampleMode::top_k) {
    if (mode.k < 1) throw std::invalid_argument("decode_step_sample: k >= 1");
    support = std::min(mode.k, support);
  } else if (mode.kind == SampleMode::top_p) {
    if (mode.p <= 0.0 || mode.p > 1.0) throw std::invalid_argument("decode_step_sample: p in (0,1]");
    double mass = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      mass += std::exp(logprobs[idx[i]]);
      if (mass >= mode.p) {
        support = i + 1;
        break;
      }
    }
  }
  std::vector<double> probs(support);
  double z = 0.0;
  for (std::size_t i = 0; i < support; ++i) {
    probs[i] = std::exp(logprobs[idx[i]] / temperature);
    z += probs[i];
  }
  for (auto& v : probs) v /= z;
  return int(idx[detail::draw(probs, rng)]);
}

// Autoregressive sampling until [EOS] or max_len with one of the
// single-step strategies (greedy / top-k / top-p / multinomial).
inline std::vector<int> sample_decode(const TokenScorer& scorer, const SampleMode& mode,
                                      double temperature, std::size_t max_len, Rng& rng) {
  std::vector<int> prefix = {Tokenizer::kBos};
  std::vector<int> out;
  for (std::size_t t = 0; t < max_len; ++t) {
    const auto lp = score_next_token(scorer, prefix);
    const int token = decode_step_sample(lp, mode, temperature, rng);
    if (token == Tokenizer::kEos) break;
    out.push_back(token);
    prefix.push_back(token);
  }
  return out;
}

// ---- beam machinery ----

struct BeamHypothesis {
  std::vector<int> tokens;  // excludes the [BOS] seed
  double score = 0.0;       // cumulative log-probability
  bool alive = true;
};

namespace detail {

struct Candidate {
  std::size_t hyp = 0;
  int token = -1;  // -1: pass-through of a finished hypothesis
  double score = 0.0;
};

inline std::vector<int> prefix_of(const BeamHypothesis& h) {
  std::vector<int> p;
  p.push_back(Tokenizer::kBos);
  p.insert(p.end(), h.tokens.begin(), h.tokens.end());
  return p;
}

// All expansions of the current hypothesis set, deterministically ordered
// by (score desc, hyp asc, token asc).
inline std::vector<Candidate> gather_candidates(const TokenScorer& scorer,
                                                const std::vector<BeamHypothesis>& hyps) {
  std::vector<Candidate> out;
  for (std::size_t h = 0; h < hyps.size(); ++h) {
    if (!hyps[h].alive) {
      out.push_back({h, -1, hyps[h].score});
      continue;
    }
    const auto lp = score_next_token(scorer, prefix_of(hyps[h]));
    for (std::size_t t = 0; t < lp.size(); ++t)
      out.push_back({h, int(t), hyps[h].score + lp[t]});
  }
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.hyp != b.hyp) return a.hyp < b.hyp;
    return a.token < b.token;
  });
  return out;
}

inline BeamHypothesis extend(const std::vector<BeamHypothesis>& hyps, const Candidate& c) {
  BeamHypothesis h = hyps[c.hyp];
  if (c.token >= 0) {
    h.tokens.push_back(c.token);
    h.score = c.score;
    if (c.token == Tokenizer::kEos) h.alive = false;
  }
  return h;
}

inline bool all_finished(const std::vector<BeamHypothesis>& hyps) {
  for (const auto& h : hyps)
    if (h.alive) return false;
  return true;
}

}  // namespace detail

// Standard breadth-B search over cumulative log-probability. Length
// normalization (score / length^alpha) is applied at final ranking only.
inline std::vector<BeamHypothesis> beam_search(const TokenScorer& scorer, std::size_t B,
                                               std::size_t max_len, double length_alpha = 0.0) {
  if (B < 1) throw std::invalid_argument("beam_search: B >= 1");
  std::vector<BeamHypothesis> hyps(1);
  for (std::size_t step = 0; step < max_len && !detail::all_finished(hyps); ++step) {
    const auto cands = detail::gather_candidates(scorer, hyps);
    std::vector<BeamHypothesis> next;
    for (std::size_t i = 0; i < cands.size() && next.size() < B; ++i)
      next.push_back(detail::extend(hyps, cands[i]));
    hyps = std::move(next);
  }
  std::stable_sort(hyps.begin(), hyps.end(), [&](const BeamHypothesis& a, const BeamHypothesis& b) {
    const double na = a.score / std::pow(std::max<std::size_t>(1, a.tokens.size()), length_alpha);
    const double nb = b.score / std::pow(std::max<std::size_t>(1, b.tokens.size()), length_alpha);
    return na > nb;
  });
  return hyps;
}

inline std::vector<int> greedy_decode(const TokenScorer& scorer, std::size_t max_len) {
  return beam_search(scorer, 1, max_len)[0].tokens;
}

// Group-wise beam search over a shared candidate pool. Groups pick B/G
// candidates each, sequentially; a candidate's score is penalized by
// lambda_div times the number of times its token was already selected at
// this step by earlier groups. With lambda_div = 0 the sequential selection
// reproduces plain beam search exactly.
inline std::vector<BeamHypothesis> diverse_beam_search(const TokenScorer& scorer, std::size_t B,
                                                       std::size_t groups, double lambda_div,
                                                       std::size_t max_len) {
  if (B < 1 || groups < 1 || B % groups != 0)
    throw std::invalid_argument("diverse_beam_search: G must divide B");
  if (lambda_div < 0.0) throw std::invalid_argument("diverse_beam_search: lambda_div >= 0");
  const std::size_t per_group = B / groups;
  std::vector<BeamHypothesis> hyps(1);
  for (std::size_t step = 0; step < max_len && !detail::all_finished(hyps); ++step) {
    const auto cands = detail::gather_candidates(scorer, hyps);
    std::vector<bool> used(cands.size(), false);
    std::map<int, std::size_t> token_count;
    std::vector<BeamHypothesis> next;
    for (std::size_t g = 0; g < groups && next.size() < B; ++g) {
      std::vector<int> group_tokens;
      for (std::size_t pick = 0; pick < per_group; ++pick) {
        std::size_t best = cands.size();
        double best_score = 0.0;
        for (std::size_t i = 0; i < cands.size(); ++i) {
          if (used[i]) continue;
          double s = cands[i].score;
          if (cands[i].token >= 0) {
            auto it = token_count.find(cands[i].token);
            if (it != token_count.end()) s -= lambda_div * double(it->second);
          }
          if (best == cands.size() || s > best_score) {
            best = i;
            best_score = s;
          }
        }
        if (best == cands.size()) break;
        used[best] = true;
        if (cands[best].token >= 0) group_tokens.push_back(cands[best].token);
        next.push_back(detail::extend(hyps, cands[best]));
      }
      // this group's token picks penalize later groups
      for (int t : group_tokens) ++token_count[t];
    }
    hyps = std::move(next);
  }
  std::stable_sort(hyps.begin(), hyps.end(),
                   [](const BeamHypothesis& a, const BeamHypothesis& b) { return a.score > b.score; });
  return hyps;
}

// ---- EDBS ----

struct EDBSConfig {
  std::size_t beam_width = 4;       // B
  double omega = 0.5;               // fixed per-run comparison point
  double theta0 = 1.0;              // converge threshold, decayed per step
  double decay = 0.9;
  std::size_t edit_distance = 1;    // L
  std::size_t max_steps = 64;       // T
  std::set<char32_t> delimiters = default_sentence_delimiters();
  double diversity_strength = 0.5;
  std::string augment_template = "关注：{entities}。";
  bool recompute_after_delete = true;
  bool literal_sentence_distance = false;  // compare whole sentence vs entity
  std::size_t sample_pool_factor = 2;      // stochastic pool = B * factor
  std::uint64_t seed = 0;

  void validate() const {
    if (beam_width < 1) throw std::invalid_argument("edbs: B >= 1");
    if (omega <= 0.0 || omega >= 1.0) throw std::invalid_argument("edbs: omega in (0,1)");
    if (theta0 <= 0.0) throw std::invalid_argument("edbs: theta0 > 0");
    if (decay <= 0.0 || decay >= 1.0) throw std::invalid_argument("edbs: decay in (0,1)");
    if (delimiters.empty()) throw std::invalid_argument("edbs: delimiter set non-empty");
    if (diversity_strength < 0.0) throw std::invalid_argument("edbs: diversity_strength >= 0");
    if (sample_pool_factor < 1) throw std::invalid_argument("edbs: sample_pool_factor >= 1");
  }
};

struct EdbsSearchResult {
  std::vector<BeamHypothesis> hypotheses;
  std::vector<double> theta_schedule;   // theta_t used at step t
  std::vector<bool> stochastic_steps;   // branch taken at step t
};

// Search phase: B slots expanded group-sequentially over the shared
// candidate pool. Step 0 is always argmax; at step t >= 1 a slot samples
// multinomially from its penalized candidate pool while omega <= theta,
// then switches to argmax as theta decays.
inline EdbsSearchResult edbs_search(const TokenScorer& scorer, const EDBSConfig& cfg) {
  cfg.validate();
  const std::size_t B = cfg.beam_width;
  Rng rng(cfg.seed);
  EdbsSearchResult res;
  std::vector<BeamHypothesis> hyps(1);
  for (std::size_t step = 0; step < cfg.max_steps && !detail::all_finished(hyps); ++step) {
    // closed form keeps theta_t = theta0 * decay^t bit-exact at every step
    const double theta = cfg.theta0 * std::pow(cfg.decay, double(step));
    res.theta_schedule.push_back(theta);
    const bool stochastic = step >= 1 && cfg.omega <= theta;
    res.stochastic_steps.push_back(stochastic);
    const auto cands = detail::gather_candidates(scorer, hyps);
    std::vector<bool> used(cands.size(), false);
    std::map<int, std::size_t> token_count;
    std::vector<BeamHypothesis> next;
    for (std::size_t slot = 0; slot < B; ++slot) {
      // penalized scores of unused candidates, best-first
      std::vector<std::pair<std::size_t, double>> pool;
      for (std::size_t i = 0; i < cands.size(); ++i) {
        if (used[i]) continue;
        double s = cands[i].score;
        if (cands[i].token >= 0) {
          auto it = token_count.find(cands[i].token);
          if (it != token_count.end()) s -= cfg.diversity_strength * double(it->second);
        }
        pool.emplace_back(i, s);
      }
      if (pool.empty()) break;
      std::stable_sort(pool.begin(), pool.end(),
                       [](const auto& a, const auto& b) { return a.second > b.second; });
      std::size_t chosen;
      if (stochastic) {
        const std::size_t n = std::min(pool.size(), B * cfg.sample_pool_factor);
        std::vector<double> probs(n);
        double mx = pool[0].second, z = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          probs[i] = std::exp(pool[i].second - mx);
          z += probs[i];
        }
        for (auto& v : probs) v /= z;
        chosen = pool[detail::draw(probs, rng)].first;
      } else {
        chosen = pool[0].first;
      }
      used[chosen] = true;
      next.push_back(detail::extend(hyps, cands[chosen]));
      if (cands[chosen].token >= 0) ++token_count[cands[chosen].token];
    }
    hyps = std::move(next);
  }
  std::stable_sort(hyps.begin(), hyps.end(),
                   [](const BeamHypothesis& a, const BeamHypothesis& b) { return a.score > b.score; });
  res.hypotheses = std::move(hyps);
  return res;
}

// ---- revision phase ----

struct DeletedSentence {
  std::string sentence;
  std::string offending_mention;
  std::size_t min_distance = 0;
};

struct RevisionReport {
  std::vector<DeletedSentence> deleted;
  std::vector<std::string> augmented;
  double coverage = 1.0;
};

struct RevisionResult {
  std::string text;
  RevisionReport report;
};

// Deletes sentences whose every detected mention is farther than L (edit
// distance) from all predicted entities, then appends any predicted entity
// still missing through the augment template.
inline RevisionResult entity_revise(const std::string& candidate,
                                    const std::vector<std::string>& predicted,
                                    const EntityVocabulary& vocab, const EDBSConfig& cfg) {
  RevisionResult out;
  // nothing to enforce without predictions: the candidate passes through
  if (predicted.empty()) {
    out.text = candidate;
    return out;
  }
  const auto sentences = split_sentences(candidate, cfg.delimiters);
  const std::set<std::string> pred_set(predicted.begin(), predicted.end());

  std::string kept;
  for (const auto& g : sentences) {
    const auto mentions = match_entities(g, vocab).mentions;
    if (mentions.empty()) {
      kept += g;
      continue;
    }
    bool delete_sentence;
    DeletedSentence record{g, "", std::size_t(-1)};
    if (cfg.literal_sentence_distance) {
      std::size_t min_d = std::size_t(-1);
      for (const auto& s : pred_set) min_d = std::min(min_d, levenshtein(g, s));
      delete_sentence = min_d > cfg.edit_distance;
      record.offending_mention = mentions.front().entity;
      record.min_distance = min_d;
    } else {
      delete_sentence = true;
      for (const auto& m : mentions) {
        std::size_t min_d = std::size_t(-1);
        for (const auto& s : pred_set) min_d = std::min(min_d, levenshtein(m.entity, s));
        if (min_d <= cfg.edit_distance) {
          delete_sentence = false;
          break;
        }
        if (min_d < record.min_distance || record.offending_mention.empty()) {
          record.offending_mention = m.entity;
          record.min_distance = min_d;
        }
      }
    }
    if (delete_sentence)
      out.report.deleted.push_back(std::move(record));
    else
      kept += g;
  }

  const std::string detect_base = cfg.recompute_after_delete ? kept : candidate;
  const auto detected = match_entities(detect_base, vocab).entities;
  const std::set<std::string> detected_set(detected.begin(), detected.end());
  std::vector<std::string> missing;
  for (const auto& e : pred_set)
    if (!detected_set.count(e)) missing.push_back(e);
  out.text = kept;
  if (!missing.empty()) {
    std::string joined;
    for (std::size_t i = 0; i < missing.size(); ++i) {
      if (i) joined += "，";
      joined += missing[i];
    }
    std::string rendered = cfg.augment_template;
    const auto pos = rendered.find("{entities}");
    if (pos == std::string::npos)
      throw std::invalid_argument("augment_template must contain {entities}");
    rendered.replace(pos, std::string("{entities}").size(), joined);
    out.text += rendered;
    out.report.augmented = std::move(missing);
  }

  if (pred_set.empty()) {
    out.report.coverage = 1.0;
  } else {
    const auto final_detected = match_entities(out.text, vocab).entities;
    const std::set<std::string> fin(final_detected.begin(), final_detected.end());
    std::size_t covered = 0;
    for (const auto& e : pred_set) covered += fin.count(e);
    out.report.coverage = double(covered) / double(pred_set.size());
  }
  return out;
}

// ---- full EDBS ----

struct EdbsCandidate {
  BeamHypothesis raw;
  std::string revised_text;
  RevisionReport report;
};

struct EdbsResult {
  std::string response;
  std::vector<EdbsCandidate> candidates;
  EdbsSearchResult search;
};

// Search then per-hypothesis revision; final response is the candidate with
// the best (entity coverage, length-normalized log-probability) rank.
inline EdbsResult edbs(const TokenScorer& scorer, const Tokenizer& tok,
                       const std::vector<std::string>& predicted, const EntityVocabulary& vocab,
                       const EDBSConfig& cfg) {
  EdbsResult out;
  out.search = edbs_search(scorer, cfg);
  for (const auto& h : out.search.hypotheses) {
    EdbsCandidate c;
    c.raw = h;
    auto rev = entity_revise(tok.decode(h.tokens), predicted, vocab, cfg);
    c.revised_text = std::move(rev.text);
    c.report = std::move(rev.report);
    out.candidates.push_back(std::move(c));
  }
  std::size_t best = 0;
  auto norm_score = [](const EdbsCandidate& c) {
    return c.raw.score / double(std::max<std::size_t>(1, c.raw.tokens.size()));
  };
  for (std::size_t i = 1; i < out.candidates.size(); ++i) {
    const auto& a = out.candidates[i];
    const auto& b = out.candidates[best];
    if (a.report.coverage > b.report.coverage ||
        (a.report.coverage == b.report.coverage && norm_score(a) > norm_score(b)))
      best = i;
  }
  if (!out.candidates.empty()) out.response = out.candidates[best].revised_text;
  return out;
}

}  // namespace medgen

#pragma once

#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "medgen/corpus.hpp"
#include "medgen/utf8.hpp"

namespace medgen {

struct BleuResult {
  std::vector<double> bleu_n;  // BLEU-1 .. BLEU-max_n, each in [0, 100]
  double bleu_avg = 0.0;
};

// Character-level BLEU with clipped n-gram precision. p1 is unsmoothed;
// for n >= 2, p_n = (match_n + 1) / (total_n + 1). BP = min(1, exp(1 - r/c)).
inline BleuResult bleu(const std::string& candidate, const std::string& reference,
                       std::size_t max_n = 4) {
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");
  BleuResult out;
  out.bleu_n.assign(max_n, 0.0);
  const std::u32string cand = utf8::decode(candidate);
  const std::u32string ref = utf8::decode(reference);
  if (cand.empty()) return out;

  std::vector<double> log_p(max_n, 0.0);
  bool zero = false;
  for (std::size_t n = 1; n <= max_n; ++n) {
    std::map<std::u32string, std::size_t> ref_counts;
    if (ref.size() >= n)
      for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[ref.substr(i, n)];
    std::map<std::u32string, std::size_t> cand_counts;
    std::size_t total = cand.size() >= n ? cand.size() - n + 1 : 0;
    for (std::size_t i = 0; i + n <= cand.size(); ++i) ++cand_counts[cand.substr(i, n)];
    std::size_t match = 0;
    for (const auto& [gram, c] : cand_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) match += std::min(c, it->second);
    }
    double p;
    if (n == 1) {
      p = total ? double(match) / double(total) : 0.0;
      if (p == 0.0) zero = true;
    } else {
      p = double(match + 1) / double(total + 1);
    }
    log_p[n - 1] = p > 0.0 ? std::log(p) : 0.0;
  }
  const double bp = std::min(1.0, std::exp(1.0 - double(ref.size()) / double(cand.size())));
  double acc = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    acc += log_p[n - 1];
    out.bleu_n[n - 1] = zero ? 0.0 : 100.0 * bp * std::exp(acc / double(n));
  }
  for (double v : out.bleu_n) out.bleu_avg += v / double(max_n);
  return out;
}

struct EntityCounts {
  std::size_t tp = 0, fp = 0, fn = 0;

  EntityCounts& operator+=(const EntityCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

inline EntityCounts entity_counts_response(const std::string& generated,
                                           const std::vector<std::string>& gold_entities,
                                           const EntityVocabulary& vocab) {
  const auto pred = match_entities(generated, vocab).entities;
  const std::set<std::string> p(pred.begin(), pred.end());
  const std::set<std::string> g(gold_entities.begin(), gold_entities.end());
  EntityCounts c;
  for (const auto& e : p) (g.count(e) ? c.tp : c.fp)++;
  for (const auto& e : g)
    if (!p.count(e)) ++c.fn;
  return c;
}

struct Prf {
  double precision = 0.0, recall = 0.0, f1 = 0.0;  // fractions in [0, 1]
};

inline Prf prf_from_counts(const EntityCounts& c) {
  Prf r;
  r.precision = (c.tp + c.fp) ? double(c.tp) / double(c.tp + c.fp) : 0.0;
  r.recall = (c.tp + c.fn) ? double(c.tp) / double(c.tp + c.fn) : 0.0;
  if (c.tp + c.fp + c.fn == 0) {
    r.precision = r.recall = r.f1 = 1.0;  // empty-pool convention
    return r;
  }
  r.f1 = (r.precision + r.recall) > 0.0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  return r;
}

// Response-level entity scores: predicted set = dictionary matches in the
// generated text, compared against the gold entity set.
inline Prf entity_f1_response(const std::string& generated,
                              const std::vector<std::string>& gold_entities,
                              const EntityVocabulary& vocab) {
  return prf_from_counts(entity_counts_response(generated, gold_entities, vocab));
}

inline double avg_score(double entity_f1, double bleu_avg) {
  return (entity_f1 + bleu_avg) / 2.0;
}

struct DialogueEval {
  BleuResult bleu;
  EntityCounts entities;
};

struct EvalReport {
  double bleu_1 = 0, bleu_2 = 0, bleu_3 = 0, bleu_4 = 0;
  double bleu_avg = 0;
  double entity_f1 = 0, entity_precision = 0, entity_recall = 0;  // x100
  double avg = 0;
  std::vector<DialogueEval> per_dialogue;

  nlohmann::json to_json() const {
    return {{"bleu_1", bleu_1},   {"bleu_2", bleu_2},
            {"bleu_3", bleu_3},   {"bleu_4", bleu_4},
            {"bleu_avg", bleu_avg}, {"entity_f1", entity_f1},
            {"entity_precision", entity_precision},
            {"entity_recall", entity_recall},
            {"avg", avg},         {"dialogues", per_dialogue.size()}};
  }
};

// Micro-pooled entity scores, corpus-mean BLEU, combined Avg.
inline EvalReport evaluate_corpus(const std::vector<std::string>& outputs,
                                  const std::vector<std::string>& references,
                                  const std::vector<std::vector<std::string>>& gold_entities,
                                  const EntityVocabulary& vocab) {
  if (outputs.size() != references.size() || outputs.size() != gold_entities.size())
    throw std::invalid_argument("evaluate_corpus: misaligned outputs/references");
  EvalReport rep;
  EntityCounts pooled;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    DialogueEval de;
    de.bleu = bleu(outputs[i], references[i]);
    de.entities = entity_counts_response(outputs[i], gold_entities[i], vocab);
    pooled += de.entities;
    rep.bleu_1 += de.bleu.bleu_n[0];
    rep.bleu_2 += de.bleu.bleu_n[1];
    rep.bleu_3 += de.bleu.bleu_n[2];
    rep.bleu_4 += de.bleu.bleu_n[3];
    rep.per_dialogue.push_back(std::move(de));
  }
  const double n = outputs.empty() ? 1.0 : double(outputs.size());
  rep.bleu_1 /= n;
  rep.bleu_2 /= n;
  rep.bleu_3 /= n;
  rep.bleu_4 /= n;
  rep.bleu_avg = (rep.bleu_1 + rep.bleu_2 + rep.bleu_3 + rep.bleu_4) / 4.0;
  const Prf prf = prf_from_counts(pooled);
  rep.entity_precision = 100.0 * prf.precision;
  rep.entity_recall = 100.0 * prf.recall;
  rep.entity_f1 = 100.0 * prf.f1;
  rep.avg = avg_score(rep.entity_f1, rep.bleu_avg);
  return rep;
}

inline std::string format_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// Aligned plain-text table: one row per labelled report (Avg. / F1 / BLEU).
inline std::string render_report_table(
    const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::ostringstream os;
  std::size_t w = 16;
  for (const auto& [name, rep] : rows) w = std::max(w, name.size() + 2);
  os << std::string(w, ' ') << "  Avg.    F1      BLEU\n";
  for (const auto& [name, rep] : rows) {
    os << name << std::string(w - name.size(), ' ') << "  " << format_score(rep.avg) << "   "
       << format_score(rep.entity_f1) << "   " << format_score(rep.bleu_avg) << "\n";
  }
  return os.str();
}

}  // namespace medgen

#pragma once

#include <algorithm>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "medgen/utf8.hpp"
#include "medgen/vocab.hpp"

namespace medgen {

enum class Speaker { patient, doctor };

inline std::string to_string(Speaker s) { return s == Speaker::patient ? "patient" : "doctor"; }

inline Speaker speaker_from_string(const std::string& s) {
  if (s == "patient") return Speaker::patient;
  if (s == "doctor") return Speaker::doctor;
  throw ParseError("unknown speaker: " + s);
}

struct Turn {
  Speaker speaker = Speaker::patient;
  std::string text;
  std::vector<std::string> entities;
};

struct Dialogue {
  std::string id;
  std::vector<Turn> turns;

  std::size_t entity_count() const {
    std::size_t n = 0;
    for (const auto& t : turns) n += t.entities.size();
    return n;
  }
};

using Corpus = std::vector<Dialogue>;

struct EntityMention {
  std::string entity;
  std::size_t begin = 0;  // codepoint offsets
  std::size_t end = 0;
};

struct EntityMatch {
  std::vector<std::string> entities;  // unique, sorted
  std::vector<EntityMention> mentions;
};

struct LinearizedInput {
  std::vector<int> tokens;
  std::vector<std::pair<std::size_t, std::size_t>> sentence_spans;  // [start, end)
  std::vector<std::vector<std::string>> sentence_entities;
};

struct CorpusStats {
  std::size_t dialogues = 0;
  std::size_t utterances = 0;
  double chars_per_dialogue = 0.0;
  double chars_per_utterance = 0.0;
  double entities_per_dialogue = 0.0;
  double entities_per_utterance = 0.0;
};

// ---- validation / persistence ----

inline void validate_dialogue(const Dialogue& d, const EntityVocabulary& vocab) {
  if (d.turns.size() < 2)
    throw ValidationError("dialogue " + d.id + " has fewer than 2 turns");
  for (const auto& t : d.turns) {
    if (t.text.empty()) throw ValidationError("dialogue " + d.id + " has an empty turn");
    for (const auto& e : t.entities)
      if (!vocab.contains(e))
        throw ValidationError("dialogue " + d.id + " references unknown entity \"" + e + "\"");
  }
}

inline Dialogue dialogue_from_json(const nlohmann::json& j) {
  Dialogue d;
  d.id = j.at("id").get<std::string>();
  for (const auto& tj : j.at("turns")) {
    Turn t;
    t.speaker = speaker_from_string(tj.at("speaker").get<std::string>());
    t.text = tj.at("text").get<std::string>();
    t.entities = tj.value("entities", std::vector<std::string>{});
    d.turns.push_back(std::move(t));
  }
  return d;
}

inline nlohmann::json dialogue_to_json(const Dialogue& d) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : d.turns)
    turns.push_back({{"speaker", to_string(t.speaker)}, {"text", t.text}, {"entities", t.entities}});
  return {{"id", d.id}, {"turns", turns}};
}

// Newline-delimited records, one dialogue per line.
inline Corpus load_corpus(const std::string& path, const EntityVocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read corpus: " + path);
  Corpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    Dialogue d;
    try {
      d = dialogue_from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
    validate_dialogue(d, vocab);
    corpus.push_back(std::move(d));
  }
  return corpus;
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write corpus: " + path);
  for (const auto& d : corpus) out << dialogue_to_json(d).dump() << "\n";
}

// ---- linearization ----

// [CLS], then per history turn: text tokens, optional [SAP]-separated entity
// block, [SEP]. Sentence spans index each turn's text tokens.
inline LinearizedInput linearize_dialogue(const Dialogue& d, const Tokenizer& tok,
                                          std::size_t upto_turn,
                                          bool include_history_entities) {
  if (upto_turn == 0 || upto_turn > d.turns.size())
    throw std::out_of_range("linearize_dialogue: upto_turn out of range");
  LinearizedInput out;
  out.tokens.push_back(Tokenizer::kCls);
  for (std::size_t i = 0; i < upto_turn; ++i) {
    const Turn& t = d.turns[i];
    const std::size_t start = out.tokens.size();
    for (int id : tok.encode(t.text)) out.tokens.push_back(id);
    out.sentence_spans.emplace_back(start, out.tokens.size());
    out.sentence_entities.push_back(t.entities);
    if (include_history_entities && !t.entities.empty()) {
      for (const auto& e : t.entities) {
        out.tokens.push_back(Tokenizer::kSap);
        for (int id : tok.encode(e)) out.tokens.push_back(id);
      }
    }
    out.tokens.push_back(Tokenizer::kSep);
  }
  return out;
}

// ---- dictionary matching ----

// Longest-match, left-to-right scan over codepoints.
inline EntityMatch match_entities(const std::string& text, const EntityVocabulary& vocab) {
  const std::u32string u = utf8::decode(text);
  std::vector<std::u32string> surfaces;
  surfaces.reserve(vocab.size());
  std::size_t max_len = 0;
  for (const auto& s : vocab.surfaces()) {
    surfaces.push_back(utf8::decode(s));
    max_len = std::max(max_len, surfaces.back().size());
  }
  EntityMatch out;
  std::set<std::string> uniq;
  std::size_t i = 0;
  while (i < u.size()) {
    std::size_t best_len = 0;
    std::size_t best_idx = 0;
    const std::size_t cap = std::min(max_len, u.size() - i);
    for (std::size_t k = 0; k < surfaces.size(); ++k) {
      const auto& s = surfaces[k];
      if (s.size() > cap || s.size() <= best_len) continue;
      if (u.compare(i, s.size(), s) == 0) {
        best_len = s.size();
        best_idx = k;
      }
    }
    if (best_len > 0) {
      const std::string& surface = vocab.surface_at(best_idx);
      out.mentions.push_back({surface, i, i + best_len});
      uniq.insert(surface);
      i += best_len;
    } else {
      ++i;
    }
  }
  out.entities.assign(uniq.begin(), uniq.end());
  return out;
}

// ---- sentence segmentation ----

inline const std::set<char32_t>& default_sentence_delimiters() {
  static const std::set<char32_t> delims = [] {
    std::set<char32_t> d;
    for (char32_t c : utf8::decode("，。？！；,.?!;")) d.insert(c);
    return d;
  }();
  return delims;
}

// Splits after each delimiter, delimiter kept with its sentence. The
// concatenation of the result always equals the input.
inline std::vector<std::string> split_sentences(
    const std::string& text, const std::set<char32_t>& delimiters = default_sentence_delimiters()) {
  if (delimiters.empty()) throw std::invalid_argument("split_sentences: empty delimiter set");
  const std::u32string u = utf8::decode(text);
  std::vector<std::string> out;
  std::u32string cur;
  for (char32_t c : u) {
    cur.push_back(c);
    if (delimiters.count(c)) {
      out.push_back(utf8::encode(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(utf8::encode(cur));
  return out;
}

// ---- filtering / statistics ----

// Keeps dialogues whose total entity-annotation count is strictly greater
// than min_entities.
inline Corpus filter_by_entity_count(const Corpus& corpus, std::size_t min_entities) {
  Corpus out;
  for (const auto& d : corpus)
    if (d.entity_count() > min_entities) out.push_back(d);
  return out;
}

inline std::size_t codepoint_length(const std::string& s) { return utf8::decode(s).size(); }

inline CorpusStats stats_from_totals(std::size_t dialogues, std::size_t utterances,
                                     std::size_t total_chars, std::size_t total_entities) {
  CorpusStats s;
  s.dialogues = dialogues;
  s.utterances = utterances;
  s.chars_per_dialogue = dialogues ? double(total_chars) / double(dialogues) : 0.0;
  s.chars_per_utterance = utterances ? double(total_chars) / double(utterances) : 0.0;
  s.entities_per_dialogue = dialogues ? double(total_entities) / double(dialogues) : 0.0;
  s.entities_per_utterance = utterances ? double(total_entities) / double(utterances) : 0.0;
  return s;
}

inline CorpusStats corpus_stats(const Corpus& corpus) {
  std::size_t utterances = 0, chars = 0, entities = 0;
  for (const auto& d : corpus) {
    utterances += d.turns.size();
    for (const auto& t : d.turns) {
      chars += codepoint_length(t.text);
      entities += t.entities.size();
    }
  }
  return stats_from_totals(corpus.size(), utterances, chars, entities);
}

// ---- synthetic corpus ----

struct SynthSpec {
  std::size_t dialogues = 200;
  std::size_t entity_count = 24;
  std::size_t domain_count = 5;
  std::size_t min_turns = 2;
  std::size_t max_turns = 6;
  std::size_t max_entities_per_turn = 3;
  std::uint64_t seed = 0;

  void validate() const {
    if (entity_count == 0 || entity_count > EntityVocabulary::kMaxEntities)
      throw std::invalid_argument("entity_count must be in [1, 160]");
    if (domain_count == 0 || domain_count > EntityVocabulary::kMaxDomains)
      throw std::invalid_argument("domain_count must be in [1, 5]");
    if (min_turns < 2 || max_turns < min_turns)
      throw std::invalid_argument("turn range invalid (need min >= 2, max >= min)");
    if (max_entities_per_turn == 0)
      throw std::invalid_argument("max_entities_per_turn must be >= 1");
  }
};

inline EntityVocabulary make_synthetic_vocabulary(const SynthSpec& spec) {
  spec.validate();
  EntityVocabulary vocab(spec.domain_count);
  for (std::size_t i = 0; i < spec.entity_count; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "ENT_%03zu", i);
    vocab.add(buf, int(i % spec.domain_count));
  }
  return vocab;
}

// Templated patient/doctor exchanges over abstract entity names. Doctor
// turns contain every annotated entity verbatim so dictionary matching can
// recover the annotations.
inline std::pair<Corpus, EntityVocabulary> generate_synthetic_corpus(const SynthSpec& spec) {
  spec.validate();
  EntityVocabulary vocab = make_synthetic_vocabulary(spec);
  std::mt19937_64 rng(spec.seed);

  static const std::vector<std::string> patient_lines = {
      "i feel pain in my belly.", "the pain gets worse at night.",
      "what should i do now?",    "i also feel sick after meals.",
      "is this something serious?", "the symptoms started last week."};
  static const std::vector<std::string> doctor_openers = {
      "please take ", "you should check ", "i suggest ", "let us start with "};
  static const std::vector<std::string> doctor_joiners = {" and then ", " together with ", " plus "};
  static const std::vector<std::string> doctor_tails = {
      " twice a day.", " before meals.", " and rest well.", " for one week."};

  auto pick = [&rng](const auto& pool) {
    std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
    return pool[d(rng)];
  };

  Corpus corpus;
  corpus.reserve(spec.dialogues);
  for (std::size_t di = 0; di < spec.dialogues; ++di) {
    Dialogue d;
    char idbuf[24];
    std::snprintf(idbuf, sizeof idbuf, "synth_%05zu", di);
    d.id = idbuf;
    std::uniform_int_distribution<std::size_t> turn_dist(spec.min_turns, spec.max_turns);
    std::size_t n_turns = turn_dist(rng);
    if (n_turns % 2 != 0) ++n_turns;  // alternate patient/doctor, end on doctor
    for (std::size_t ti = 0; ti < n_turns; ++ti) {
      Turn t;
      if (ti % 2 == 0) {
        t.speaker = Speaker::patient;
        t.text = pick(patient_lines);
      } else {
        t.speaker = Speaker::doctor;
        std::uniform_int_distribution<std::size_t> ent_dist(1, spec.max_entities_per_turn);
        const std::size_t n_ent = ent_dist(rng);
        std::uniform_int_distribution<std::size_t> idx_dist(0, vocab.size() - 1);
        std::set<std::string> chosen;
        while (chosen.size() < n_ent) chosen.insert(vocab.surface_at(idx_dist(rng)));
        std::string text = pick(doctor_openers);
        bool first = true;
        for (const auto& e : chosen) {
          if (!first) text += pick(doctor_joiners);
          text += e;
          first = false;
          t.entities.push_back(e);
        }
        text += pick(doctor_tails);
        t.text = std::move(text);
      }
      d.turns.push_back(std::move(t));
    }
    validate_dialogue(d, vocab);
    corpus.push_back(std::move(d));
  }
  return {std::move(corpus), std::move(vocab)};
}

// Character inventory for a corpus plus its entity vocabulary.
inline Tokenizer build_tokenizer(const Corpus& corpus, const EntityVocabulary& vocab,
                                 std::size_t max_vocab = 0) {
  std::vector<std::string> texts;
  for (const auto& d : corpus)
    for (const auto& t : d.turns) texts.push_back(t.text);
  for (const auto& s : vocab.surfaces()) texts.push_back(s);
  return Tokenizer::build(texts, max_vocab);
}

}  // namespace medgen

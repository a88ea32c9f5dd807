#include <catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <random>

#include "medgen/corpus.hpp"

using namespace medgen;

namespace {

EntityVocabulary small_vocab() {
  EntityVocabulary v(2);
  v.add("ab", 0);
  v.add("abc", 1);
  v.add("E1", 0);
  v.add("E2", 1);
  return v;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("medgen_test_" + name);
}

}  // namespace

TEST_CASE("load_corpus: empty file yields empty corpus") {
  const auto path = temp_file("empty.jsonl");
  std::ofstream(path.string()).close();
  CHECK(load_corpus(path.string(), small_vocab()).empty());
}

TEST_CASE("load_corpus: save/load round-trip of one record") {
  Dialogue d;
  d.id = "d0";
  d.turns = {{Speaker::patient, "hello", {}}, {Speaker::doctor, "take E1", {"E1"}}};
  const auto path = temp_file("one.jsonl");
  save_corpus({d}, path.string());
  const auto corpus = load_corpus(path.string(), small_vocab());
  REQUIRE(corpus.size() == 1);
  CHECK(corpus[0].id == "d0");
  CHECK(corpus[0].turns[1].entities == std::vector<std::string>{"E1"});
}

TEST_CASE("load_corpus: unknown entity names the offender") {
  Dialogue d;
  d.id = "d0";
  d.turns = {{Speaker::patient, "hi", {}}, {Speaker::doctor, "X here", {"X"}}};
  const auto path = temp_file("bad.jsonl");
  save_corpus({d}, path.string());
  CHECK_THROWS_WITH(load_corpus(path.string(), small_vocab()),
                    Catch::Matchers::ContainsSubstring("\"X\""));
}

TEST_CASE("load_corpus: malformed record reports the line number") {
  const auto path = temp_file("malformed.jsonl");
  std::ofstream out(path.string());
  out << R"({"id":"ok","turns":[{"speaker":"patient","text":"a"},{"speaker":"doctor","text":"b"}]})"
      << "\n"
      << "{not json\n";
  out.close();
  CHECK_THROWS_WITH(load_corpus(path.string(), small_vocab()),
                    Catch::Matchers::ContainsSubstring("line 2"));
}

TEST_CASE("linearize_dialogue: template with and without history entities") {
  Tokenizer tok = Tokenizer::build({"abE1"});
  Dialogue d;
  d.id = "d";
  d.turns = {{Speaker::patient, "ab", {"E1"}}, {Speaker::doctor, "b", {}}};

  auto with = linearize_dialogue(d, tok, 1, true);
  std::vector<int> expected = {Tokenizer::kCls, tok.char_id(U'a'), tok.char_id(U'b'),
                               Tokenizer::kSap, tok.char_id(U'E'), tok.char_id(U'1'),
                               Tokenizer::kSep};
  CHECK(with.tokens == expected);
  REQUIRE(with.sentence_spans.size() == 1);
  CHECK(with.sentence_spans[0] == std::pair<std::size_t, std::size_t>{1, 3});

  auto without = linearize_dialogue(d, tok, 1, false);
  CHECK(without.tokens == std::vector<int>{Tokenizer::kCls, tok.char_id(U'a'),
                                           tok.char_id(U'b'), Tokenizer::kSep});

  CHECK_THROWS(linearize_dialogue(d, tok, 0, true));
  CHECK_THROWS(linearize_dialogue(d, tok, 3, true));
}

TEST_CASE("linearize_dialogue: second turn block follows first turn's [SEP]") {
  Tokenizer tok = Tokenizer::build({"abcd"});
  Dialogue d;
  d.id = "d";
  d.turns = {{Speaker::patient, "ab", {}}, {Speaker::doctor, "cd", {}}};
  auto lin = linearize_dialogue(d, tok, 2, true);
  // string-level oracle: concatenate template pieces and re-tokenize
  std::vector<int> oracle = {Tokenizer::kCls};
  for (int id : tok.encode("ab")) oracle.push_back(id);
  oracle.push_back(Tokenizer::kSep);
  for (int id : tok.encode("cd")) oracle.push_back(id);
  oracle.push_back(Tokenizer::kSep);
  CHECK(lin.tokens == oracle);
  // round-trip: stripping specials reproduces the concatenated turn texts
  CHECK(tok.decode(lin.tokens) == "abcd");
}

TEST_CASE("match_entities: basics and longest match") {
  const auto vocab = small_vocab();
  CHECK(match_entities("", vocab).entities.empty());

  auto m = match_entities("xabcx", vocab);
  CHECK(m.entities == std::vector<std::string>{"abc"});
  REQUIRE(m.mentions.size() == 1);
  CHECK(m.mentions[0].begin == 1);
  CHECK(m.mentions[0].end == 4);

  auto exact = match_entities("ab", vocab);
  REQUIRE(exact.entities == std::vector<std::string>{"ab"});
  CHECK(exact.mentions[0].begin == 0);
  CHECK(exact.mentions[0].end == 2);
}

TEST_CASE("match_entities: brute-force longest-match oracle on random strings") {
  const auto vocab = small_vocab();
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> ch('a', 'c');
  std::uniform_int_distribution<std::size_t> len(0, 12);
  for (int trial = 0; trial < 200; ++trial) {
    std::string text;
    const std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i) text.push_back(char(ch(rng)));
    // oracle: greedy left-to-right scan over all substrings
    std::vector<std::pair<std::size_t, std::size_t>> oracle;
    for (std::size_t i = 0; i < text.size();) {
      std::size_t best = 0;
      for (const auto& s : vocab.surfaces())
        if (text.compare(i, s.size(), s) == 0) best = std::max(best, s.size());
      if (best) {
        oracle.emplace_back(i, i + best);
        i += best;
      } else {
        ++i;
      }
    }
    const auto got = match_entities(text, vocab);
    REQUIRE(got.mentions.size() == oracle.size());
    for (std::size_t i = 0; i < oracle.size(); ++i) {
      CHECK(got.mentions[i].begin == oracle[i].first);
      CHECK(got.mentions[i].end == oracle[i].second);
    }
    // idempotence / invariance under appending non-matching text
    const auto again = match_entities(text + "zzz", vocab);
    CHECK(again.entities == got.entities);
  }
}

TEST_CASE("split_sentences: delimiter kept, concatenation invariant") {
  const std::set<char32_t> delims = {U',', U'.'};
  CHECK(split_sentences("a,b.", delims) == std::vector<std::string>{"a,", "b."});
  CHECK(split_sentences("abc", delims) == std::vector<std::string>{"abc"});
  CHECK(split_sentences("a,,", delims) == std::vector<std::string>{"a,", ","});
  CHECK(split_sentences("", delims).empty());
  CHECK_THROWS(split_sentences("a", {}));

  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> ch('a', 'e');  // includes no delimiter
  std::uniform_int_distribution<int> coin(0, 3);
  std::uniform_int_distribution<std::size_t> len(0, 20);
  for (int trial = 0; trial < 200; ++trial) {
    std::string text;
    const std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i)
      text.push_back(coin(rng) == 0 ? (coin(rng) % 2 ? ',' : '.') : char(ch(rng)));
    std::string cat;
    for (const auto& s : split_sentences(text, delims)) {
      CHECK(!s.empty());
      cat += s;
    }
    CHECK(cat == text);
  }
}

TEST_CASE("generate_synthetic_corpus: determinism, size, matcher recovery") {
  SynthSpec spec;
  spec.dialogues = 10;
  spec.seed = 42;
  auto [c1, v1] = generate_synthetic_corpus(spec);
  auto [c2, v2] = generate_synthetic_corpus(spec);
  REQUIRE(c1.size() == 10);
  // byte-identical under the same seed
  const auto p1 = std::filesystem::temp_directory_path() / "medgen_synth1.jsonl";
  const auto p2 = std::filesystem::temp_directory_path() / "medgen_synth2.jsonl";
  save_corpus(c1, p1.string());
  save_corpus(c2, p2.string());
  std::ifstream f1(p1), f2(p2);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());

  // doctor turns contain their annotated entities verbatim
  for (const auto& d : c1)
    for (const auto& t : d.turns) {
      if (t.speaker != Speaker::doctor) continue;
      const auto found = match_entities(t.text, v1).entities;
      for (const auto& e : t.entities)
        CHECK(std::find(found.begin(), found.end(), e) != found.end());
    }

  SynthSpec bad = spec;
  bad.entity_count = 0;
  CHECK_THROWS(generate_synthetic_corpus(bad));
}

TEST_CASE("filter_by_entity_count: recount oracle and composition") {
  SynthSpec spec;
  spec.dialogues = 40;
  spec.max_turns = 10;
  spec.max_entities_per_turn = 4;
  spec.seed = 5;
  auto [corpus, vocab] = generate_synthetic_corpus(spec);

  // every synthetic dialogue has at least one entity, so min 0 is identity
  CHECK(filter_by_entity_count(corpus, 0).size() == corpus.size());
  CHECK(filter_by_entity_count(corpus, 10000).empty());

  const auto kept = filter_by_entity_count(corpus, 11);
  for (const auto& d : kept) {
    std::size_t recount = 0;
    for (const auto& t : d.turns) recount += t.entities.size();
    CHECK(recount > 11);
  }
  std::size_t expect = 0;
  for (const auto& d : corpus)
    if (d.entity_count() > 11) ++expect;
  CHECK(kept.size() == expect);

  // filter(a) then filter(b) == filter(max(a,b))
  for (std::size_t a : {0, 3, 8})
    for (std::size_t b : {1, 5, 12}) {
      const auto lhs = filter_by_entity_count(filter_by_entity_count(corpus, a), b);
      const auto rhs = filter_by_entity_count(corpus, std::max(a, b));
      REQUIRE(lhs.size() == rhs.size());
      for (std::size_t i = 0; i < lhs.size(); ++i) CHECK(lhs[i].id == rhs[i].id);
    }
}

TEST_CASE("corpus_stats: fixtures and recount oracle") {
  // dataset-scale fixture from aggregate totals
  const auto s = stats_from_totals(17864, 385951, 3579052, 113079);
  CHECK(s.dialogues == 17864);
  CHECK(s.utterances == 385951);
  CHECK_THAT(s.chars_per_dialogue, Catch::Matchers::WithinAbs(200.35, 0.005));
  CHECK_THAT(s.entities_per_dialogue, Catch::Matchers::WithinAbs(6.33, 0.005));

  Dialogue d;
  d.id = "d";
  d.turns = {{Speaker::patient, "abcd", {}}, {Speaker::doctor, "efgh", {}}};
  const auto one = corpus_stats({d});
  CHECK(one.chars_per_utterance == 4.0);
  CHECK(one.utterances == 2);

  CHECK(corpus_stats({}).dialogues == 0);
  CHECK(corpus_stats({}).chars_per_dialogue == 0.0);

  SynthSpec spec;
  spec.dialogues = 15;
  spec.seed = 9;
  auto [corpus, vocab] = generate_synthetic_corpus(spec);
  const auto got = corpus_stats(corpus);
  std::size_t utt = 0, chars = 0, ents = 0;
  for (const auto& dd : corpus)
    for (const auto& t : dd.turns) {
      ++utt;
      chars += utf8::decode(t.text).size();
      ents += t.entities.size();
    }
  CHECK(got.utterances == utt);
  CHECK(got.chars_per_utterance == double(chars) / double(utt));
  CHECK(got.entities_per_dialogue == double(ents) / double(corpus.size()));
}

#pragma once

#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "medgen/utf8.hpp"

namespace medgen {

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Character-level tokenizer: one id per codepoint plus the special tokens.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kSep = 2;
  static constexpr int kSap = 3;
  static constexpr int kBos = 4;
  static constexpr int kEos = 5;
  static constexpr int kUnk = 6;
  static constexpr int kNumSpecial = 7;

  Tokenizer() = default;

  // Builds the character inventory from a set of texts; characters are id'd
  // in sorted codepoint order so the mapping is corpus-order independent.
  static Tokenizer build(const std::vector<std::string>& texts, std::size_t max_vocab = 0) {
    std::set<char32_t> chars;
    for (const auto& t : texts)
      for (char32_t c : utf8::decode(t)) chars.insert(c);
    Tokenizer tok;
    for (char32_t c : chars) {
      if (max_vocab > 0 && tok.size() >= max_vocab) break;
      tok.add_char(c);
    }
    return tok;
  }

  int add_char(char32_t c) {
    auto it = char_to_id_.find(c);
    if (it != char_to_id_.end()) return it->second;
    const int id = int(kNumSpecial + id_to_char_.size());
    char_to_id_[c] = id;
    id_to_char_.push_back(c);
    return id;
  }

  std::size_t size() const { return kNumSpecial + id_to_char_.size(); }

  int char_id(char32_t c) const {
    auto it = char_to_id_.find(c);
    return it == char_to_id_.end() ? kUnk : it->second;
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (char32_t c : utf8::decode(text)) ids.push_back(char_id(c));
    return ids;
  }

  static bool is_special(int id) { return id < kNumSpecial; }

  // Renders ids back to text, dropping special tokens.
  std::string decode(const std::vector<int>& ids) const {
    std::u32string s;
    for (int id : ids) {
      if (is_special(id)) continue;
      const std::size_t k = std::size_t(id) - kNumSpecial;
      if (k >= id_to_char_.size()) throw std::out_of_range("tokenizer: id out of range");
      s.push_back(id_to_char_[k]);
    }
    return utf8::encode(s);
  }

  nlohmann::json to_json() const {
    std::vector<std::uint32_t> cps(id_to_char_.begin(), id_to_char_.end());
    return {{"chars", cps}};
  }

  static Tokenizer from_json(const nlohmann::json& j) {
    Tokenizer tok;
    for (std::uint32_t c : j.at("chars").get<std::vector<std::uint32_t>>())
      tok.add_char(char32_t(c));
    return tok;
  }

 private:
  std::map<char32_t, int> char_to_id_;
  std::vector<char32_t> id_to_char_;
};

// Closed entity inventory mapping surface strings to domain type ids.
// Class indices follow sorted surface order.
class EntityVocabulary {
 public:
  static constexpr std::size_t kMaxEntities = 160;
  static constexpr std::size_t kMaxDomains = 5;

  EntityVocabulary() = default;
  explicit EntityVocabulary(std::size_t domain_count) : domain_count_(domain_count) {
    if (domain_count_ == 0 || domain_count_ > kMaxDomains)
      throw ValidationError("domain count must be in [1, 5]");
  }

  void add(const std::string& surface, int domain) {
    if (surface.empty()) throw ValidationError("entity surface must be non-empty");
    if (domain < 0 || std::size_t(domain) >= domain_count_)
      throw ValidationError("entity domain id out of range for \"" + surface + "\"");
    if (entries_.count(surface)) throw ValidationError("duplicate entity: " + surface);
    if (entries_.size() >= kMaxEntities)
      throw ValidationError("entity vocabulary exceeds maximum size");
    entries_[surface] = domain;
    reindex();
  }

  bool contains(const std::string& surface) const { return entries_.count(surface) > 0; }

  int domain_of(const std::string& surface) const {
    auto it = entries_.find(surface);
    if (it == entries_.end()) throw ValidationError("unknown entity: " + surface);
    return it->second;
  }

  // Class index of an entity (position in sorted surface order).
  std::size_t index_of(const std::string& surface) const {
    auto it = index_.find(surface);
    if (it == index_.end()) throw ValidationError("unknown entity: " + surface);
    return it->second;
  }

  const std::string& surface_at(std::size_t idx) const { return surfaces_.at(idx); }
  const std::vector<std::string>& surfaces() const { return surfaces_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t domain_count() const { return domain_count_; }
  const std::map<std::string, int>& entries() const { return entries_; }

  nlohmann::json to_json() const {
    return {{"entities", entries_}, {"domain_count", domain_count_}};
  }

  static EntityVocabulary from_json(const nlohmann::json& j) {
    EntityVocabulary v(j.value("domain_count", kMaxDomains));
    for (auto& [surface, dom] : j.at("entities").items()) v.add(surface, dom.get<int>());
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocabulary: " + path);
    out << to_json().dump() << "\n";
  }

  static EntityVocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read vocabulary: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("vocabulary parse error: ") + e.what());
    }
    return from_json(j);
  }

 private:
  void reindex() {
    surfaces_.clear();
    index_.clear();
    for (const auto& [s, d] : entries_) {
      index_[s] = surfaces_.size();
      surfaces_.push_back(s);
    }
  }

  std::map<std::string, int> entries_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::string> surfaces_;
  std::size_t domain_count_ = kMaxDomains;
};

}  // namespace medgen

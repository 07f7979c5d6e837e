// Character-level byte-pair encoding. Words are split into characters plus an
// end-of-word marker, so decoding is a plain concatenation.
#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "graftmt/data/text.hpp"
#include "graftmt/errors.hpp"

namespace graftmt {

inline constexpr const char* kEndOfWord = "</w>";

using BpeMerge = std::pair<std::string, std::string>;

// Merge `pair` left to right without overlaps.
inline void apply_merge(std::vector<std::string>& symbols, const BpeMerge& pair) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == pair.first && symbols[i + 1] == pair.second) {
      out.push_back(pair.first + pair.second);
      ++i;
    } else {
      out.push_back(symbols[i]);
    }
  }
  symbols = std::move(out);
}

inline std::vector<std::string> word_symbols(const std::string& word) {
  std::vector<std::string> s;
  for (char c : word) s.emplace_back(1, c);
  s.emplace_back(kEndOfWord);
  return s;
}

class BpeVocab {
 public:
  BpeVocab() = default;

  // Greedy merges of the most frequent adjacent pair until the token table
  // reaches target_size; ties go to the lexicographically smallest pair.
  static BpeVocab learn(const std::vector<std::string>& corpus, std::size_t target_size) {
    if (corpus.empty()) throw ContractError("bpe_learn: empty corpus");
    std::map<std::string, std::size_t> word_freq;
    std::set<std::string> alphabet;
    for (const auto& line : corpus) {
      for (const auto& w : split_words(line)) {
        ++word_freq[w];
        for (char c : w) alphabet.insert(std::string(1, c));
      }
    }
    alphabet.insert(kEndOfWord);
    if (target_size < alphabet.size()) {
      throw ConfigError("bpe_learn: target size " + std::to_string(target_size) + " is below the alphabet size " +
                        std::to_string(alphabet.size()));
    }
    BpeVocab v;
    for (const auto& a : alphabet) v.add_token(a);

    std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
    for (const auto& [w, n] : word_freq) words.emplace_back(word_symbols(w), n);

    while (v.tokens_.size() < target_size) {
      std::map<BpeMerge, std::size_t> counts;
      for (const auto& [syms, n] : words)
        for (std::size_t i = 0; i + 1 < syms.size(); ++i) counts[{syms[i], syms[i + 1]}] += n;
      if (counts.empty()) break;
      // std::map iterates pairs in lexicographic order, so the first maximum wins ties.
      auto best = counts.begin();
      for (auto it = counts.begin(); it != counts.end(); ++it)
        if (it->second > best->second) best = it;
      const BpeMerge merge = best->first;
      v.merges_.push_back(merge);
      v.add_token(merge.first + merge.second);
      for (auto& [syms, n] : words) apply_merge(syms, merge);
    }
    return v;
  }

  [[nodiscard]] const std::vector<BpeMerge>& merges() const { return merges_; }
  [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }
  [[nodiscard]] std::size_t size() const { return tokens_.size(); }

  // -1 when the token is not in the table.
  [[nodiscard]] int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? -1 : it->second;
  }

  [[nodiscard]] std::vector<std::string> encode_word(const std::string& word) const {
    auto syms = word_symbols(word);
    for (const auto& m : merges_) {
      if (syms.size() < 2) break;
      apply_merge(syms, m);
    }
    return syms;
  }

  [[nodiscard]] std::vector<std::string> encode(const std::string& line) const {
    std::vector<std::string> out;
    for (const auto& w : split_words(line)) {
      auto s = encode_word(w);
      out.insert(out.end(), s.begin(), s.end());
    }
    return out;
  }

  [[nodiscard]] static std::string decode(const std::vector<std::string>& tokens) {
    std::string joined;
    for (const auto& t : tokens) joined += t;
    std::string out;
    const std::string eow = kEndOfWord;
    std::size_t pos = 0;
    while (pos < joined.size()) {
      const auto next = joined.find(eow, pos);
      if (next == std::string::npos) {
        if (!out.empty()) out += ' ';
        out += joined.substr(pos);
        break;
      }
      if (!out.empty()) out += ' ';
      out += joined.substr(pos, next - pos);
      pos = next + eow.size();
    }
    return out;
  }

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [a, b] : merges_) merges.push_back({a, b});
    return {{"tokens", tokens_}, {"merges", merges}};
  }

  static BpeVocab from_json(const nlohmann::json& j) {
    BpeVocab v;
    for (const auto& t : j.at("tokens")) v.add_token(t.get<std::string>());
    for (const auto& m : j.at("merges")) v.merges_.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write BPE vocabulary '" + path + "'");
    out << to_json().dump(1) << '\n';
  }

  static BpeVocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open BPE vocabulary '" + path + "'");
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("BPE vocabulary '" + path + "': " + e.what());
    }
  }

  friend bool operator==(const BpeVocab& a, const BpeVocab& b) {
    return a.tokens_ == b.tokens_ && a.merges_ == b.merges_;
  }

 private:
  void add_token(const std::string& t) {
    if (index_.count(t)) return;
    index_.emplace(t, static_cast<int>(tokens_.size()));
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<BpeMerge> merges_;
};

}  // namespace graftmt

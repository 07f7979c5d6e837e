// Word-level vocabulary with the model's special tokens in fixed slots.
#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "graftmt/data/text.hpp"
#include "graftmt/errors.hpp"
#include "graftmt/model.hpp"

namespace graftmt {

class Vocab {
 public:
  Vocab() {
    for (const char* s : {"<pad>", "<s>", "</s>", "<unk>", "<mask>"}) add(s);
  }

  // Tokens ordered by descending frequency, ties lexicographic.
  static Vocab build(const std::vector<std::string>& lines) {
    std::map<std::string, std::size_t> freq;
    for (const auto& l : lines)
      for (const auto& w : split_words(l)) ++freq[w];
    std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [w, n] : items) v.add(w);
    return v;
  }

  int add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
  }

  [[nodiscard]] std::size_t size() const { return tokens_.size(); }
  [[nodiscard]] bool contains(const std::string& token) const { return index_.count(token) != 0; }
  [[nodiscard]] int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? Special::kUnk : it->second;
  }
  [[nodiscard]] const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw IndexError("vocab: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  [[nodiscard]] std::vector<int> encode(const std::string& line) const {
    std::vector<int> ids;
    for (const auto& w : split_words(line)) ids.push_back(id(w));
    return ids;
  }

  // Drops specials other than <unk>; stops at the first </s>.
  [[nodiscard]] std::string decode(const std::vector<int>& ids) const {
    std::vector<std::string> words;
    for (int i : ids) {
      if (i == Special::kEos) break;
      if (i == Special::kPad || i == Special::kBos) continue;
      words.push_back(token(i));
    }
    return join_words(words);
  }

  // One "token<TAB>id" line per entry.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write vocabulary '" + path + "'");
    for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open vocabulary '" + path + "'");
    Vocab v;
    v.tokens_.clear();
    v.index_.clear();
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos) throw IoError("vocabulary '" + path + "': malformed line '" + line + "'");
      const auto tok = line.substr(0, tab);
      const auto id = std::stoul(line.substr(tab + 1));
      if (id != v.tokens_.size()) throw IoError("vocabulary '" + path + "': ids must be consecutive from 0");
      v.add(tok);
    }
    if (v.size() < static_cast<std::size_t>(Special::kCount) || v.token(Special::kMask) != "<mask>") {
      throw IoError("vocabulary '" + path + "' does not start with the special tokens");
    }
    return v;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace graftmt

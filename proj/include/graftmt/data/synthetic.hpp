// Synthetic languages for desk-scale translation: Zipf-distributed sentences
// over a pseudo-word inventory, a bijective word cipher defining a "foreign"
// language, and a word-order transform. A parallel pair is
// (reorder(cipher(s)), s).
//
// With branching = 0 words are drawn independently. With branching = k each
// word is followed by one of k fixed successors (a first-order grammar), so a
// monolingual corpus carries structure a language model can learn.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "graftmt/data/text.hpp"
#include "graftmt/errors.hpp"
#include "graftmt/rng.hpp"

namespace graftmt {

enum class Reorder { kNone, kReverse, kSwapAdjacent, kRotate };

NLOHMANN_JSON_SERIALIZE_ENUM(Reorder, {{Reorder::kNone, "none"},
                                       {Reorder::kReverse, "reverse"},
                                       {Reorder::kSwapAdjacent, "swap-adjacent"},
                                       {Reorder::kRotate, "rotate-k"}})

enum class Split { kTrain, kValid, kTest };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "?";
}

struct SyntheticLangSpec {
  std::size_t vocab_size = 48;  // base words shared by every language
  double zipf_exponent = 1.1;
  bool cipher = true;
  std::uint64_t cipher_seed = 1;
  std::string script;  // prefix marking foreign words; empty keeps the base spelling
  Reorder reorder = Reorder::kNone;
  std::size_t rotate_k = 1;
  std::uint64_t seed = 0;  // sentence sampler
  std::size_t min_len = 3;
  std::size_t max_len = 12;
  std::size_t branching = 0;
  std::uint64_t grammar_seed = 7;

  void validate() const {
    if (vocab_size == 0 || vocab_size > 4900) throw ConfigError("synthetic language: vocab_size must be in [1, 4900]");
    if (min_len == 0 || min_len > max_len) throw ConfigError("synthetic language: need 1 <= min_len <= max_len");
    if (!(zipf_exponent > 0.0)) throw ConfigError("synthetic language: zipf_exponent must be positive");
    if (branching > vocab_size) throw ConfigError("synthetic language: branching cannot exceed vocab_size");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticLangSpec, vocab_size, zipf_exponent, cipher, cipher_seed,
                                                script, reorder, rotate_k, seed, min_len, max_len,
                                                branching, grammar_seed)

// Pronounceable two-syllable word for index i (unique below 4900).
inline std::string base_word(std::size_t i) {
  static constexpr char kCons[] = "bdfgklmnprstvz";
  static constexpr char kVow[] = "aeiou";
  auto syl = [](std::size_t k) { return std::string{kCons[k / 5], kVow[k % 5]}; };
  return syl(i % 70) + syl((i / 70) % 70);
}

template <typename W>
std::vector<W> apply_reorder(std::vector<W> words, Reorder r, std::size_t k) {
  switch (r) {
    case Reorder::kNone:
      break;
    case Reorder::kReverse:
      std::reverse(words.begin(), words.end());
      break;
    case Reorder::kSwapAdjacent:
      for (std::size_t i = 0; i + 1 < words.size(); i += 2) std::swap(words[i], words[i + 1]);
      break;
    case Reorder::kRotate:
      if (!words.empty()) std::rotate(words.begin(), words.begin() + static_cast<std::ptrdiff_t>(k % words.size()), words.end());
      break;
  }
  return words;
}

class SyntheticLanguage {
 public:
  explicit SyntheticLanguage(SyntheticLangSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    cdf_.resize(spec_.vocab_size);
    double acc = 0.0;
    for (std::size_t r = 0; r < spec_.vocab_size; ++r) {
      acc += std::pow(static_cast<double>(r + 1), -spec_.zipf_exponent);
      cdf_[r] = acc;
    }
    for (auto& c : cdf_) c /= acc;
    if (spec_.branching > 0) {
      // Successors are distinct Zipf draws, so frequent words stay frequent.
      Rng rng(spec_.grammar_seed);
      successors_.resize(spec_.vocab_size);
      for (auto& next : successors_) {
        while (next.size() < spec_.branching) {
          const auto w = draw(cdf_, rng.uniform());
          if (std::find(next.begin(), next.end(), w) == next.end()) next.push_back(w);
        }
      }
      double acc_k = 0.0;
      for (std::size_t r = 0; r < spec_.branching; ++r) {
        acc_k += std::pow(static_cast<double>(r + 1), -spec_.zipf_exponent);
        successor_cdf_.push_back(acc_k);
      }
      for (auto& c : successor_cdf_) c /= acc_k;
    }
    cipher_.resize(spec_.vocab_size);
    std::iota(cipher_.begin(), cipher_.end(), std::size_t{0});
    if (spec_.cipher) {
      Rng rng(spec_.cipher_seed);
      rng.shuffle(cipher_.begin(), cipher_.end());
    }
  }

  [[nodiscard]] const SyntheticLangSpec& spec() const { return spec_; }
  [[nodiscard]] const std::vector<std::size_t>& cipher() const { return cipher_; }

  [[nodiscard]] std::string target_word(std::size_t i) const { return base_word(i); }
  [[nodiscard]] std::string source_word(std::size_t i) const { return spec_.script + base_word(cipher_[i]); }

  // Base-word indices of the i-th sentence of a split. Each split draws from
  // its own seed stream, so splits never share a sampler state.
  [[nodiscard]] std::vector<std::size_t> sentence(Split split, std::size_t i) const {
    Rng rng(hash_combine(spec_.seed, hash_combine(static_cast<std::uint64_t>(split) + 1, i)));
    const auto len = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(spec_.min_len), static_cast<std::int64_t>(spec_.max_len)));
    std::vector<std::size_t> out(len);
    for (std::size_t i = 0; i < len; ++i) {
      const double u = rng.uniform();
      out[i] = i == 0 || successors_.empty() ? draw(cdf_, u) : successors_[out[i - 1]][draw(successor_cdf_, u)];
    }
    return out;
  }

  // Empty unless the language has a grammar.
  [[nodiscard]] const std::vector<std::vector<std::size_t>>& successors() const { return successors_; }

  [[nodiscard]] std::vector<std::string> target_words(const std::vector<std::size_t>& s) const {
    std::vector<std::string> out;
    for (auto w : s) out.push_back(target_word(w));
    return out;
  }

  [[nodiscard]] std::vector<std::string> source_words(const std::vector<std::size_t>& s) const {
    std::vector<std::string> out;
    for (auto w : s) out.push_back(source_word(w));
    return apply_reorder(std::move(out), spec_.reorder, spec_.rotate_k);
  }

 private:
  static std::size_t draw(const std::vector<double>& cdf, double u) {
    const auto i = static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    return std::min(i, cdf.size() - 1);
  }

  SyntheticLangSpec spec_;
  std::vector<double> cdf_;
  std::vector<double> successor_cdf_;
  std::vector<std::vector<std::size_t>> successors_;
  std::vector<std::size_t> cipher_;
};

struct TextPair {
  std::string src;
  std::string tgt;

  friend bool operator==(const TextPair&, const TextPair&) = default;
};

inline std::vector<TextPair> gen_parallel(const SyntheticLangSpec& spec, std::size_t n, Split split = Split::kTrain) {
  if (n == 0) throw ContractError("gen_parallel: n must be >= 1");
  const SyntheticLanguage lang(spec);
  std::vector<TextPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = lang.sentence(split, i);
    out.push_back({join_words(lang.source_words(s)), join_words(lang.target_words(s))});
  }
  return out;
}

// Target-language monolingual text (the body's pretraining corpus).
inline std::vector<std::string> gen_monolingual(const SyntheticLangSpec& spec, std::size_t n,
                                                Split split = Split::kTrain) {
  const SyntheticLanguage lang(spec);
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(join_words(lang.target_words(lang.sentence(split, i))));
  return out;
}

}  // namespace graftmt

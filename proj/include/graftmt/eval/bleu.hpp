// Corpus BLEU over whitespace tokens (orders 1-4, clipped counts, brevity
// penalty, add-one smoothing of zero matches above unigrams) and paired
// bootstrap resampling.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "graftmt/data/text.hpp"
#include "graftmt/errors.hpp"
#include "graftmt/rng.hpp"

namespace graftmt {

inline constexpr std::size_t kBleuOrder = 4;

struct BleuStats {
  std::array<std::size_t, kBleuOrder> matches{};
  std::array<std::size_t, kBleuOrder> totals{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& o) {
    for (std::size_t n = 0; n < kBleuOrder; ++n) {
      matches[n] += o.matches[n];
      totals[n] += o.totals[n];
    }
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
    return *this;
  }
};

inline BleuStats sentence_stats(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
  BleuStats s;
  s.hyp_len = hyp.size();
  s.ref_len = ref.size();
  for (std::size_t n = 1; n <= kBleuOrder; ++n) {
    std::map<std::vector<std::string>, std::size_t> ref_counts, hyp_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[{ref.begin() + i, ref.begin() + i + n}];
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[{hyp.begin() + i, hyp.begin() + i + n}];
    for (const auto& [g, c] : hyp_counts) {
      auto it = ref_counts.find(g);
      if (it != ref_counts.end()) s.matches[n - 1] += std::min(c, it->second);
    }
    s.totals[n - 1] = hyp.size() >= n ? hyp.size() - n + 1 : 0;
  }
  return s;
}

inline double bleu_from_stats(const BleuStats& s) {
  if (s.hyp_len == 0 || s.matches[0] == 0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < kBleuOrder; ++n) {
    double p = 0.0;
    if (n == 0) {
      p = static_cast<double>(s.matches[0]) / static_cast<double>(s.totals[0]);
    } else if (s.matches[n] == 0) {
      p = 1.0 / (static_cast<double>(s.totals[n]) + 1.0);
    } else {
      p = static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]);
    }
    log_p += std::log(p) / static_cast<double>(kBleuOrder);
  }
  const double c = static_cast<double>(s.hyp_len), r = static_cast<double>(s.ref_len);
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return 100.0 * bp * std::exp(log_p);
}

inline std::vector<BleuStats> corpus_stats(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  if (hyps.size() != refs.size()) {
    throw ContractError("bleu: " + std::to_string(hyps.size()) + " hypotheses for " + std::to_string(refs.size()) +
                        " references");
  }
  std::vector<BleuStats> out;
  out.reserve(hyps.size());
  for (std::size_t i = 0; i < hyps.size(); ++i) out.push_back(sentence_stats(split_words(hyps[i]), split_words(refs[i])));
  return out;
}

inline double bleu_corpus(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  BleuStats total;
  for (const auto& s : corpus_stats(hyps, refs)) total += s;
  return bleu_from_stats(total);
}

struct BootstrapResult {
  double bleu_a = 0.0;
  double bleu_b = 0.0;
  double p_value = 1.0;  // fraction of resamples where the worse system wins or ties
  std::size_t resamples = 0;
};

inline BootstrapResult paired_bootstrap(const std::vector<std::string>& hyps_a, const std::vector<std::string>& hyps_b,
                                        const std::vector<std::string>& refs, std::size_t n_resamples = 1000,
                                        std::uint64_t seed = 0) {
  const auto sa = corpus_stats(hyps_a, refs);
  const auto sb = corpus_stats(hyps_b, refs);
  if (refs.empty()) throw ContractError("paired_bootstrap: empty test set");
  if (n_resamples == 0) throw ContractError("paired_bootstrap: need at least one resample");
  BootstrapResult r;
  r.resamples = n_resamples;
  r.bleu_a = bleu_corpus(hyps_a, refs);
  r.bleu_b = bleu_corpus(hyps_b, refs);
  const bool a_worse = r.bleu_a <= r.bleu_b;
  Rng rng(seed);
  const auto n = static_cast<std::int64_t>(refs.size());
  std::size_t worse_wins = 0;
  for (std::size_t k = 0; k < n_resamples; ++k) {
    BleuStats ta, tb;
    for (std::int64_t i = 0; i < n; ++i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
      ta += sa[j];
      tb += sb[j];
    }
    const double a = bleu_from_stats(ta), b = bleu_from_stats(tb);
    if (a_worse ? a >= b : b >= a) ++worse_wins;
  }
  r.p_value = static_cast<double>(worse_wins) / static_cast<double>(n_resamples);
  return r;
}

inline double exact_match(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  if (hyps.size() != refs.size()) throw ContractError("exact_match: hypothesis and reference counts differ");
  if (hyps.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) hit += split_words(hyps[i]) == split_words(refs[i]);
  return static_cast<double>(hit) / static_cast<double>(hyps.size());
}

}  // namespace graftmt

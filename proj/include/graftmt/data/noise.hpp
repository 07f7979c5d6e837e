// Document noising for denoising pretraining: start rotation, sentence
// shuffling and span masking, applied in that order to the source copy only.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "json.hpp"

#include "graftmt/errors.hpp"
#include "graftmt/rng.hpp"

namespace graftmt {

struct NoiseSpec {
  double mask_ratio = 0.3;  // fraction of tokens covered by masked spans
  double mean_span = 3.0;   // Poisson mean of span lengths; 0-length spans insert a mask
  bool sentence_shuffle = true;
  bool rotate_start = true;

  static NoiseSpec off() { return {0.0, 3.0, false, false}; }

  void validate() const {
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) {
      throw ConfigError("noise: mask ratio must lie in [0, 1], got " + std::to_string(mask_ratio));
    }
    if (!(mean_span >= 0.0)) throw ConfigError("noise: mean span length must be >= 0");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NoiseSpec, mask_ratio, mean_span, sentence_shuffle, rotate_start)

struct NoisedDocument {
  std::vector<int> tokens;
  std::size_t masked = 0;  // original tokens replaced by mask tokens
  std::size_t original = 0;
};

// Noised copy of a document given as sentences of token ids.
inline NoisedDocument noise_document(const std::vector<std::vector<int>>& doc, const NoiseSpec& spec, Rng& rng,
                                     int mask_id) {
  spec.validate();
  if (doc.empty()) throw ContractError("noise_document: empty document");

  // Segments are contiguous runs of one sentence; rotation can split one in two.
  std::vector<std::vector<int>> segments;
  std::size_t n = 0;
  for (const auto& s : doc) n += s.size();
  if (spec.rotate_start && n > 0) {
    const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
    std::size_t offset = 0;
    std::vector<std::vector<int>> head, tail;
    for (const auto& s : doc) {
      const std::size_t end = offset + s.size();
      if (end <= start) {
        tail.push_back(s);
      } else if (offset >= start) {
        head.push_back(s);
      } else {
        const auto cut = static_cast<std::ptrdiff_t>(start - offset);
        head.emplace_back(s.begin() + cut, s.end());
        tail.emplace_back(s.begin(), s.begin() + cut);
      }
      offset = end;
    }
    segments = std::move(head);
    segments.insert(segments.end(), tail.begin(), tail.end());
  } else {
    segments = doc;
  }
  if (spec.sentence_shuffle) rng.shuffle(segments.begin(), segments.end());

  std::vector<int> flat;
  flat.reserve(n);
  for (const auto& s : segments) flat.insert(flat.end(), s.begin(), s.end());

  NoisedDocument out;
  out.original = n;
  const auto target = static_cast<std::size_t>(std::lround(spec.mask_ratio * static_cast<double>(n)));
  std::vector<char> masked(n, 0);
  std::vector<char> insert_before(n + 1, 0);
  std::size_t covered = 0;
  // Spans are placed at uniform starts; the last span is clipped so exactly
  // `target` tokens end up masked.
  std::size_t guard = 0;
  while (covered < target && guard++ < 64 * (n + 1)) {
    const auto len = static_cast<std::size_t>(rng.poisson(spec.mean_span));
    const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
    if (len == 0) {
      insert_before[start] = 1;
      continue;
    }
    for (std::size_t i = start; i < n && i < start + len && covered < target; ++i) {
      if (!masked[i]) {
        masked[i] = 1;
        ++covered;
      }
    }
  }
  // Finish deterministically if the sampler stalled (only possible for ratios near 1).
  for (std::size_t i = 0; i < n && covered < target; ++i) {
    if (!masked[i]) {
      masked[i] = 1;
      ++covered;
    }
  }
  out.masked = covered;

  bool last_mask = false;
  for (std::size_t i = 0; i <= n; ++i) {
    if (insert_before[i] && !last_mask) {
      out.tokens.push_back(mask_id);
      last_mask = true;
    }
    if (i == n) break;
    if (masked[i]) {
      if (!last_mask) out.tokens.push_back(mask_id);
      last_mask = true;
    } else {
      out.tokens.push_back(flat[i]);
      last_mask = false;
    }
  }
  return out;
}

}  // namespace graftmt

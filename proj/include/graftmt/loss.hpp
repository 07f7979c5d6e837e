// Label-smoothed cross-entropy over token logits.
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "graftmt/errors.hpp"
#include "graftmt/tensor.hpp"

namespace graftmt {

struct CrossEntropyOptions {
  double label_smoothing = 0.0;
  int pad_id = 0;
  // Divisor for the summed loss. Zero means "number of non-pad targets" (a mean).
  double normalizer = 0.0;
};

// Per-target loss -[(1-eps) log p(target) + eps * mean_v log p(v)], summed over
// non-pad positions and divided by the normalizer.
template <typename T>
Tensor<T> cross_entropy_label_smoothed(Tape<T>& tape, const Tensor<T>& logits,
                                       std::span<const int> targets,
                                       const CrossEntropyOptions& options = {}) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const double eps = options.label_smoothing;
  if (!(eps >= 0.0 && eps < 1.0 + 1e-12)) {
    throw ContractError("cross_entropy: label smoothing must lie in [0,1], got " + std::to_string(eps));
  }
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  std::size_t live = 0;
  for (int t : targets) {
    if (t == options.pad_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy: target id " + std::to_string(t) + " outside vocab of " +
                       std::to_string(vocab));
    }
    ++live;
  }
  if (live == 0) throw ContractError("cross_entropy: degenerate batch, every target is padding");
  const double norm = options.normalizer > 0.0 ? options.normalizer : static_cast<double>(live);

  auto lv = logits.data();
  std::vector<T> probs(logits.numel());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = lv.data() + r * vocab;
    T* pr = probs.data() + r * vocab;
    const T mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const double log_z = std::log(z) + static_cast<double>(mx);
    for (std::size_t j = 0; j < vocab; ++j) pr[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - log_z));
    if (targets[r] == options.pad_id) continue;
    double mean_logp = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) mean_logp += static_cast<double>(row[j]) - log_z;
    mean_logp /= static_cast<double>(vocab);
    const double logp_t = static_cast<double>(row[targets[r]]) - log_z;
    total += -((1.0 - eps) * logp_t + eps * mean_logp);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / norm));
  if (tape.needs_grad({&logits})) {
    std::vector<int> saved(targets.begin(), targets.end());
    tape.record("cross_entropy", {logits}, out,
                [logits, probs = std::move(probs), saved = std::move(saved), rows, vocab, eps, norm,
                 pad = options.pad_id](std::span<const T> g) mutable {
                  auto gl = Tape<T>::grad_of(logits);
                  const double scale = static_cast<double>(g[0]) / norm;
                  const double uniform = eps / static_cast<double>(vocab);
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (saved[r] == pad) continue;
                    for (std::size_t j = 0; j < vocab; ++j) {
                      double d = static_cast<double>(probs[r * vocab + j]) - uniform;
                      if (static_cast<int>(j) == saved[r]) d -= (1.0 - eps);
                      gl[r * vocab + j] += static_cast<T>(scale * d);
                    }
                  }
                });
  }
  return out;
}

}  // namespace graftmt

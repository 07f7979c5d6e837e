// Shared helpers for the unit and acceptance suites. Nothing here calls the
// library's gradient code: the finite-difference oracle only evaluates losses.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "graftmt/data/text.hpp"
#include "graftmt/rng.hpp"
#include "graftmt/tensor.hpp"

namespace graftmt::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;
};

// |a - n| / max(|a|, |n|, floor)
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares the gradients already stored in `inputs` (from one backward pass)
// against central differences of `loss_fn`, on up to `per_tensor` random
// coordinates of each input.
inline GradCheckResult finite_difference_check(const std::function<double()>& loss_fn,
                                               std::vector<std::pair<std::string, Tensor<double>>> inputs,
                                               std::size_t per_tensor, std::uint64_t seed, double step = 1e-5) {
  GradCheckResult result;
  Rng rng(seed);
  for (auto& [name, t] : inputs) {
    const std::size_t n = t.numel();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    rng.shuffle(coords.begin(), coords.end());
    coords.resize(std::min(n, per_tensor));
    for (std::size_t idx : coords) {
      const double analytic = t.has_grad() ? t.grad()[idx] : 0.0;
      const double saved = t.data()[idx];
      t.data()[idx] = saved + step;
      const double plus = loss_fn();
      t.data()[idx] = saved - step;
      const double minus = loss_fn();
      t.data()[idx] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double err = rel_error(analytic, numeric);
      ++result.coordinates;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = name + "[" + std::to_string(idx) + "] analytic=" + std::to_string(analytic) +
                       " numeric=" + std::to_string(numeric);
      }
    }
  }
  return result;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double stddev = 1.0, bool grad = true) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal(0.0, stddev);
  t.set_requires_grad(grad);
  return t;
}

// Clipped matches by direct scanning: the k-th occurrence of an n-gram in the
// hypothesis matches iff the reference holds at least k copies.
inline double oracle_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  double m[4] = {0, 0, 0, 0}, t[4] = {0, 0, 0, 0}, c = 0, r = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto h = split_words(hyps[s]);
    const auto f = split_words(refs[s]);
    c += static_cast<double>(h.size());
    r += static_cast<double>(f.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      auto same = [n](const std::vector<std::string>& a, std::size_t i, const std::vector<std::string>& b, std::size_t j) {
        for (std::size_t k = 0; k < n; ++k)
          if (a[i + k] != b[j + k]) return false;
        return true;
      };
      for (std::size_t i = 0; i + n <= h.size(); ++i) {
        t[n - 1] += 1;
        std::size_t seen = 0, in_ref = 0;
        for (std::size_t j = 0; j <= i; ++j) seen += same(h, i, h, j);
        for (std::size_t j = 0; j + n <= f.size(); ++j) in_ref += same(h, i, f, j);
        if (seen <= in_ref) m[n - 1] += 1;
      }
    }
  }
  if (c == 0 || m[0] == 0) return 0.0;
  double prod = m[0] / t[0];
  for (int n = 1; n < 4; ++n) prod *= m[n] > 0 ? m[n] / t[n] : 1.0 / (t[n] + 1.0);
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return 100.0 * bp * std::pow(prod, 0.25);
}

inline std::string random_sentence(Rng& rng, std::size_t vocab, std::size_t max_len) {
  const auto n = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(max_len)));
  std::vector<std::string> w;
  for (std::size_t i = 0; i < n; ++i) w.push_back("w" + std::to_string(rng.uniform_int(0, static_cast<std::int64_t>(vocab) - 1)));
  return join_words(w);
}

}  // namespace graftmt::testing

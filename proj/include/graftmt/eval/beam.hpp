// Beam search over an abstract next-token scorer, plus the model-backed scorer.
// Hypotheses are ranked by cumulative log probability during search and the
// final choice uses log probability divided by length (eos included).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <vector>

#include "graftmt/errors.hpp"
#include "graftmt/model.hpp"

namespace graftmt {

struct BeamOptions {
  std::size_t beam = 5;
  std::size_t max_len = 0;  // generated tokens including eos; 0 picks 2 * src_len + 5
  bool length_penalty = true;
};

struct Hypothesis {
  std::vector<int> tokens;  // without bos; ends in eos unless truncated
  double logprob = 0.0;
  double score = 0.0;
  bool truncated = false;
};

// Log-probabilities over the vocabulary for each prefix (all prefixes share a length).
using StepFn = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<int>>&)>;

inline double hypothesis_score(double logprob, std::size_t len, bool length_penalty) {
  if (!length_penalty || len == 0) return logprob;
  return logprob / static_cast<double>(len);
}

inline Hypothesis beam_search(const StepFn& step, int eos, const BeamOptions& opts) {
  if (opts.beam == 0) throw ContractError("beam_search: beam width must be >= 1");
  if (opts.max_len == 0) throw ContractError("beam_search: max_len must be >= 1");
  struct Live {
    std::vector<int> tokens;
    double logprob;
  };
  struct Candidate {
    std::size_t parent;
    int token;
    double logprob;
  };
  std::vector<Live> live{{{}, 0.0}};
  std::vector<Hypothesis> finished;
  for (std::size_t t = 0; t < opts.max_len && !live.empty() && finished.size() < opts.beam; ++t) {
    std::vector<std::vector<int>> prefixes;
    prefixes.reserve(live.size());
    for (const auto& h : live) prefixes.push_back(h.tokens);
    const auto lp = step(prefixes);
    if (lp.size() != live.size()) throw ContractError("beam_search: scorer returned the wrong number of rows");
    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < live.size(); ++h)
      for (std::size_t v = 0; v < lp[h].size(); ++v)
        cands.push_back({h, static_cast<int>(v), live[h].logprob + lp[h][v]});
    // Ties resolve toward earlier hypotheses and lower token ids.
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.logprob > b.logprob; });
    std::vector<Live> next;
    for (std::size_t rank = 0; rank < cands.size() && next.size() < opts.beam; ++rank) {
      const auto& c = cands[rank];
      auto tokens = live[c.parent].tokens;
      tokens.push_back(c.token);
      if (c.token == eos) {
        // Only top-beam candidates may finish, so beam 1 follows the argmax path.
        if (rank < opts.beam) {
          finished.push_back({tokens, c.logprob, hypothesis_score(c.logprob, tokens.size(), opts.length_penalty), false});
        }
        continue;
      }
      next.push_back({std::move(tokens), c.logprob});
    }
    live = std::move(next);
  }
  const auto better = [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; };
  if (!finished.empty()) {
    std::stable_sort(finished.begin(), finished.end(), better);
    return finished.front();
  }
  std::vector<Hypothesis> open;
  for (const auto& h : live)
    open.push_back({h.tokens, h.logprob, hypothesis_score(h.logprob, h.tokens.size(), opts.length_penalty), true});
  if (open.empty()) throw StateError("beam_search: no hypotheses survived");
  std::stable_sort(open.begin(), open.end(), better);
  return open.front();
}

inline Hypothesis greedy_search(const StepFn& step, int eos, std::size_t max_len) {
  return beam_search(step, eos, {1, max_len, true});
}

inline std::vector<double> log_softmax_row(const float* row, std::size_t n) {
  std::vector<double> out(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
  const double lz = std::log(z) + mx;
  for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<double>(row[j]) - lz;
  return out;
}

inline std::vector<double> log_softmax_row(const double* row, std::size_t n) {
  std::vector<double> out(n);
  const double mx = *std::max_element(row, row + n);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
  const double lz = std::log(z) + mx;
  for (std::size_t j = 0; j < n; ++j) out[j] = row[j] - lz;
  return out;
}

// Next-token scorer for one source sentence: the encoder runs once and its
// memory is replicated across the live prefixes.
template <typename T>
StepFn model_step(const Seq2SeqModel<T>& model, const std::vector<int>& src) {
  if (model.training()) throw StateError("translate: model must be in eval mode");
  TapeOptions o;
  o.record = false;
  auto tape = std::make_shared<Tape<T>>(o);
  const auto src_batch = collate({src}, Special::kPad);
  const auto memory = model.encode(*tape, src_batch);
  const std::size_t d = memory.dim(1), len = src_batch.len;
  return [&model, tape, memory, src, d, len](const std::vector<std::vector<int>>& prefixes) {
    const std::size_t k = prefixes.size();
    std::vector<T> mem(k * len * d);
    for (std::size_t i = 0; i < k; ++i) std::copy(memory.data().begin(), memory.data().end(), mem.begin() + static_cast<std::ptrdiff_t>(i * len * d));
    const Tensor<T> mem_t({k * len, d}, std::move(mem));
    const auto src_k = collate(std::vector<std::vector<int>>(k, src), Special::kPad);
    std::vector<std::vector<int>> tgt_in;
    for (const auto& p : prefixes) {
      std::vector<int> row{Special::kBos};
      row.insert(row.end(), p.begin(), p.end());
      tgt_in.push_back(std::move(row));
    }
    const auto tgt = collate(tgt_in, Special::kPad);
    const auto logits = model.decode(*tape, mem_t, src_k, tgt);
    const std::size_t vocab = logits.dim(1);
    std::vector<std::vector<double>> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t row = i * tgt.len + tgt.len - 1;
      out.push_back(log_softmax_row(logits.data().data() + row * vocab, vocab));
    }
    return out;
  };
}

template <typename T>
std::size_t decode_budget(const Seq2SeqModel<T>& model, std::size_t src_len, std::size_t requested) {
  const std::size_t cap = model.config().max_positions;  // tgt_in holds bos + generated tokens minus the last
  const std::size_t want = requested ? requested : 2 * src_len + 5;
  return std::min(want, cap);
}

template <typename T>
Hypothesis translate(const Seq2SeqModel<T>& model, const std::vector<int>& src, const BeamOptions& opts) {
  BeamOptions o = opts;
  o.max_len = decode_budget(model, src.size(), opts.max_len);
  return beam_search(model_step(model, src), Special::kEos, o);
}

}  // namespace graftmt

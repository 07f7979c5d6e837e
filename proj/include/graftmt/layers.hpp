// Transformer building blocks over ParamTree-backed weights. Layers use
// post-norm ordering: x = LN(x + Dropout(Sublayer(x))).
#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "graftmt/config.hpp"
#include "graftmt/ops.hpp"
#include "graftmt/param_tree.hpp"

namespace graftmt {

// Additive attention mask value for blocked positions.
template <typename T>
constexpr T kMaskedScore = T(-1e9);

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]; undefined when the projection has no bias

  static LinearParams bind(ParamTree<T>& tree, const std::string& prefix) {
    LinearParams p;
    p.weight = tree.at(prefix + "/weight");
    if (tree.contains(prefix + "/bias")) p.bias = tree.at(prefix + "/bias");
    return p;
  }
};

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const LinearParams<T>& p) {
  auto y = matmul(tape, x, p.weight);
  return p.bias.defined() ? add_bias(tape, y, p.bias) : y;
}

template <typename T>
struct NormParams {
  Tensor<T> weight;
  Tensor<T> bias;

  static NormParams bind(ParamTree<T>& tree, const std::string& prefix) {
    return {tree.at(prefix + "/weight"), tree.at(prefix + "/bias")};
  }
};

template <typename T>
struct AttentionParams {
  LinearParams<T> q, k, v, out;

  static AttentionParams bind(ParamTree<T>& tree, const std::string& prefix) {
    return {LinearParams<T>::bind(tree, prefix + "/q_proj"), LinearParams<T>::bind(tree, prefix + "/k_proj"),
            LinearParams<T>::bind(tree, prefix + "/v_proj"), LinearParams<T>::bind(tree, prefix + "/out_proj")};
  }
};

template <typename T>
struct FfnParams {
  LinearParams<T> fc1, fc2;

  static FfnParams bind(ParamTree<T>& tree, const std::string& prefix) {
    return {LinearParams<T>::bind(tree, prefix + "/fc1"), LinearParams<T>::bind(tree, prefix + "/fc2")};
  }
};

// Padded token ids, row-major [batch, len].
struct TokenBatch {
  std::vector<int> ids;
  std::vector<std::size_t> lengths;
  std::size_t batch = 0;
  std::size_t len = 0;

  [[nodiscard]] std::size_t rows() const { return batch * len; }
  [[nodiscard]] std::vector<int> positions() const {
    std::vector<int> pos(rows());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t) pos[b * len + t] = static_cast<int>(t);
    return pos;
  }
};

inline TokenBatch collate(const std::vector<std::vector<int>>& seqs, int pad_id) {
  if (seqs.empty()) throw ContractError("collate: empty batch");
  TokenBatch b;
  b.batch = seqs.size();
  for (const auto& s : seqs) {
    if (s.empty()) throw ContractError("collate: empty sequence in batch");
    b.len = std::max(b.len, s.size());
    b.lengths.push_back(s.size());
  }
  b.ids.assign(b.batch * b.len, pad_id);
  for (std::size_t i = 0; i < seqs.size(); ++i) std::copy(seqs[i].begin(), seqs[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.len));
  return b;
}

// Additive mask [B, Tq, Tk] hiding keys past each key sequence's length and,
// when causal, keys later than the query.
template <typename T>
std::vector<T> attention_mask(std::size_t batch, std::size_t tq, std::span<const std::size_t> key_lengths,
                              std::size_t tk, bool causal) {
  std::vector<T> mask(batch * tq * tk, T{0});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t q = 0; q < tq; ++q)
      for (std::size_t k = 0; k < tk; ++k)
        if (k >= key_lengths[b] || (causal && k > q)) mask[(b * tq + q) * tk + k] = kMaskedScore<T>;
  return mask;
}

struct AttentionShape {
  std::size_t batch;
  std::size_t query_len;
  std::size_t key_len;
  std::size_t heads;
};

template <typename T>
Tensor<T> multi_head_attention(Tape<T>& tape, const AttentionParams<T>& p, const Tensor<T>& query,
                               const Tensor<T>& memory, const AttentionShape& s,
                               std::type_identity_t<std::span<const T>> mask, double attn_dropout) {
  const std::size_t d = query.last_dim();
  const std::size_t dh = d / s.heads;
  auto q = split_heads(tape, linear(tape, query, p.q), s.batch, s.query_len, s.heads);
  auto k = split_heads(tape, linear(tape, memory, p.k), s.batch, s.key_len, s.heads);
  auto v = split_heads(tape, linear(tape, memory, p.v), s.batch, s.key_len, s.heads);
  auto scores = scale(tape, bmm(tape, q, k, /*transpose_b=*/true), T(1) / std::sqrt(static_cast<T>(dh)));
  scores = add_attention_mask(tape, scores, mask, s.heads);
  auto probs = dropout(tape, softmax_lastdim(tape, scores), attn_dropout);
  auto ctx = merge_heads(tape, bmm(tape, probs, v), s.batch, s.heads);
  return linear(tape, ctx, p.out);
}

template <typename T>
Tensor<T> feed_forward(Tape<T>& tape, const FfnParams<T>& p, const Tensor<T>& x, double act_dropout = 0.0) {
  return linear(tape, dropout(tape, gelu(tape, linear(tape, x, p.fc1)), act_dropout), p.fc2);
}

template <typename T>
Tensor<T> residual_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& sub, const NormParams<T>& norm,
                        double p, double eps) {
  return layer_norm(tape, add(tape, x, dropout(tape, sub, p)), norm.weight, norm.bias, static_cast<T>(eps));
}

}  // namespace graftmt

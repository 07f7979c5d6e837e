// Source-side input module grafted in front of a pretrained body:
//
//   IM(e) = alpha * LN(W * Transformer(e))
//
// Token embeddings get learned positional embeddings once, at the embedding
// layer; fixed sinusoids are additionally added to the input of every layer.
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "graftmt/config.hpp"
#include "graftmt/layers.hpp"

namespace graftmt {

// Fixed positional value for position `l`, dimension `i` of a width-`d_s` table.
//
// Half-split form: the first half holds sin(l / 10000^(i / (d_s/2 - 1))), the
// second half cos(l / 10000^((i - (d_s/2 - 1)) / (d_s/2 - 1))). Note the cos
// branch offsets by d_s/2 - 1, not d_s/2, so its first exponent is 1/(d_s/2 - 1).
inline double sinusoidal(std::size_t l, std::size_t i, std::size_t d_s,
                         SinusoidScheme scheme = SinusoidScheme::kHalfSplit) {
  if (d_s < 4 || d_s % 2 != 0) throw ConfigError("sinusoidal: d_s must be even and >= 4, got " + std::to_string(d_s));
  if (i >= d_s) throw RangeError("sinusoidal: dimension " + std::to_string(i) + " outside width " + std::to_string(d_s));
  const double pos = static_cast<double>(l);
  if (scheme == SinusoidScheme::kInterleaved) {
    const double k = static_cast<double>(i - i % 2);
    const double angle = pos / std::pow(10000.0, k / static_cast<double>(d_s));
    return i % 2 == 0 ? std::sin(angle) : std::cos(angle);
  }
  const double denom = static_cast<double>(d_s / 2 - 1);
  if (i < d_s / 2) return std::sin(pos / std::pow(10000.0, static_cast<double>(i) / denom));
  const double shifted = static_cast<double>(i) - denom;
  return std::cos(pos / std::pow(10000.0, shifted / denom));
}

// Row-major [len, d_s]. Extending `len` never changes existing rows.
template <typename T>
std::vector<T> sinusoidal_table(std::size_t len, std::size_t d_s,
                                SinusoidScheme scheme = SinusoidScheme::kHalfSplit) {
  std::vector<T> table(len * d_s);
  for (std::size_t l = 0; l < len; ++l)
    for (std::size_t i = 0; i < d_s; ++i) table[l * d_s + i] = static_cast<T>(sinusoidal(l, i, d_s, scheme));
  return table;
}

template <typename T>
struct EncoderLayerParams {
  AttentionParams<T> self_attn;
  NormParams<T> self_attn_norm;
  FfnParams<T> ffn;
  NormParams<T> final_norm;

  static EncoderLayerParams bind(ParamTree<T>& tree, const std::string& prefix) {
    return {AttentionParams<T>::bind(tree, prefix + "/self_attn"), NormParams<T>::bind(tree, prefix + "/self_attn_norm"),
            FfnParams<T>::bind(tree, prefix + "/ffn"), NormParams<T>::bind(tree, prefix + "/final_norm")};
  }
};

struct LayerRates {
  double dropout = 0.0;
  double attention_dropout = 0.0;
  double norm_eps = 1e-5;
};

template <typename T>
Tensor<T> encoder_layer(Tape<T>& tape, const EncoderLayerParams<T>& p, const Tensor<T>& x,
                        const TokenBatch& tokens, std::size_t heads, std::type_identity_t<std::span<const T>> mask,
                        const LayerRates& rates) {
  const AttentionShape shape{tokens.batch, tokens.len, tokens.len, heads};
  auto attn = multi_head_attention(tape, p.self_attn, x, x, shape, mask, rates.attention_dropout);
  auto h = residual_norm(tape, x, attn, p.self_attn_norm, rates.dropout, rates.norm_eps);
  return residual_norm(tape, h, feed_forward(tape, p.ffn, h), p.final_norm, rates.dropout, rates.norm_eps);
}

template <typename T>
class InputModule {
 public:
  InputModule() = default;

  InputModule(ParamTree<T>& tree, const InputModuleConfig& config, std::size_t d_body)
      : config_(config), d_body_(d_body), alpha_(static_cast<T>(config.resolved_alpha(d_body))) {
    config.validate(d_body);
    embed_tokens_ = tree.at("input_module/embed_tokens");
    embed_positions_ = tree.at("input_module/embed_positions");
    for (std::size_t i = 0; i < config.n_layers; ++i) {
      layers_.push_back(EncoderLayerParams<T>::bind(tree, layer_prefix("input_module", i)));
    }
    if (config.use_projection) proj_ = tree.at("input_module/proj/weight");
    if (config.use_output_norm) out_norm_ = NormParams<T>::bind(tree, "input_module/out_norm");
    sinusoids_ = sinusoidal_table<T>(config.max_positions, config.d_s, config.sinusoid_scheme);
  }

  [[nodiscard]] const InputModuleConfig& config() const { return config_; }
  [[nodiscard]] T alpha() const { return alpha_; }
  void set_alpha(T alpha) { alpha_ = alpha; }

  // Source tokens -> [batch * len, d_body].
  Tensor<T> forward(Tape<T>& tape, const TokenBatch& src) const {
    if (src.len > config_.max_positions) {
      throw RangeError("input module: source length " + std::to_string(src.len) +
                       " exceeds positional table of " + std::to_string(config_.max_positions));
    }
    const std::size_t d = config_.d_s;
    auto tokens = scale(tape, embedding_lookup(tape, embed_tokens_, src.ids), std::sqrt(static_cast<T>(d)));
    const auto pos = src.positions();
    auto x = add(tape, tokens, embedding_lookup(tape, embed_positions_, pos));
    x = dropout(tape, x, config_.dropout);

    Tensor<T> fixed;
    if (config_.add_fixed_per_layer) {
      fixed = Tensor<T>(Shape{src.rows(), d});
      auto fv = fixed.data();
      for (std::size_t r = 0; r < src.rows(); ++r)
        std::copy_n(sinusoids_.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(pos[r]) * d), d,
                    fv.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    const auto mask = attention_mask<T>(src.batch, src.len, src.lengths, src.len, false);
    const LayerRates rates{config_.dropout, config_.attention_dropout, 1e-5};
    for (const auto& layer : layers_) {
      if (config_.add_fixed_per_layer) x = add(tape, x, fixed);
      x = encoder_layer(tape, layer, x, src, config_.heads(), mask, rates);
    }
    if (proj_.defined()) x = matmul(tape, x, proj_);
    if (out_norm_.weight.defined()) x = layer_norm(tape, x, out_norm_.weight, out_norm_.bias, T(1e-5));
    return alpha_ == T(1) ? x : scale(tape, x, alpha_);
  }

 private:
  InputModuleConfig config_;
  std::size_t d_body_ = 0;
  T alpha_ = T(1);
  Tensor<T> embed_tokens_;
  Tensor<T> embed_positions_;
  std::vector<EncoderLayerParams<T>> layers_;
  Tensor<T> proj_;
  NormParams<T> out_norm_;
  std::vector<T> sinusoids_;
};

}  // namespace graftmt

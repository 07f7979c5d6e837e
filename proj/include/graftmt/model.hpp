// Encoder-decoder transformer with optional per-layer adapters and an optional
// grafted input module replacing the encoder's token embeddings.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "graftmt/adapters.hpp"
#include "graftmt/config.hpp"
#include "graftmt/input_module.hpp"
#include "graftmt/layers.hpp"
#include "graftmt/loss.hpp"
#include "graftmt/param_tree.hpp"
#include "graftmt/rng.hpp"

namespace graftmt {

struct Special {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kMask = 4;
  static constexpr int kCount = 5;
};

// Teacher-forced training pair: decoder input is <s> + tgt, output is tgt + </s>.
struct PairBatch {
  TokenBatch src;
  TokenBatch tgt_in;
  std::vector<int> tgt_out;
  std::size_t target_tokens = 0;
};

inline PairBatch make_pair_batch(const std::vector<std::vector<int>>& src,
                                 const std::vector<std::vector<int>>& tgt) {
  if (src.empty() || src.size() != tgt.size()) {
    throw ContractError("make_pair_batch: need equally many (>0) sources and targets, got " +
                        std::to_string(src.size()) + " and " + std::to_string(tgt.size()));
  }
  std::vector<std::vector<int>> in, out;
  in.reserve(tgt.size());
  out.reserve(tgt.size());
  for (const auto& t : tgt) {
    std::vector<int> i{Special::kBos};
    i.insert(i.end(), t.begin(), t.end());
    std::vector<int> o(t.begin(), t.end());
    o.push_back(Special::kEos);
    in.push_back(std::move(i));
    out.push_back(std::move(o));
  }
  PairBatch b;
  b.src = collate(src, Special::kPad);
  b.tgt_in = collate(in, Special::kPad);
  b.tgt_out = collate(out, Special::kPad).ids;
  for (const auto& o : out) b.target_tokens += o.size();
  return b;
}

inline std::uint64_t path_hash(const std::string& path) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : path) h = (h ^ c) * 1099511628211ULL;
  return h;
}

template <typename T>
Tensor<T> init_tensor(const LayoutEntry& e, std::uint64_t seed) {
  Tensor<T> t(e.shape);
  switch (e.init) {
    case InitKind::kZeros:
      break;
    case InitKind::kOnes:
      for (auto& v : t.data()) v = T(1);
      break;
    case InitKind::kNormal:
    case InitKind::kEmbedding: {
      Rng rng(hash_combine(seed, path_hash(e.path)));
      for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, e.stddev));
      break;
    }
  }
  t.set_requires_grad(true);
  return t;
}

template <typename T>
struct DecoderLayerParams {
  AttentionParams<T> self_attn;
  NormParams<T> self_attn_norm;
  AttentionParams<T> cross_attn;
  NormParams<T> cross_attn_norm;
  FfnParams<T> ffn;
  NormParams<T> final_norm;

  static DecoderLayerParams bind(ParamTree<T>& tree, const std::string& prefix) {
    return {AttentionParams<T>::bind(tree, prefix + "/self_attn"), NormParams<T>::bind(tree, prefix + "/self_attn_norm"),
            AttentionParams<T>::bind(tree, prefix + "/cross_attn"), NormParams<T>::bind(tree, prefix + "/cross_attn_norm"),
            FfnParams<T>::bind(tree, prefix + "/ffn"),             NormParams<T>::bind(tree, prefix + "/final_norm")};
  }
};

template <typename T>
class Seq2SeqModel {
 public:
  Seq2SeqModel(const Seq2SeqModel&) = delete;
  Seq2SeqModel& operator=(const Seq2SeqModel&) = delete;
  Seq2SeqModel(Seq2SeqModel&&) noexcept = default;
  Seq2SeqModel& operator=(Seq2SeqModel&&) noexcept = default;

  static Seq2SeqModel build(const ModelConfig& config, std::uint64_t seed) {
    return build(ModelLayout{config, AdapterPlacement::kNone, {}, std::nullopt}, seed);
  }

  // Deterministic given (layout, seed); returns the model in training mode.
  static Seq2SeqModel build(const ModelLayout& layout, std::uint64_t seed) {
    layout.model.validate();
    layout.adapter.validate();
    if (layout.input_module) layout.input_module->validate(layout.model.d_model);
    Seq2SeqModel m;
    m.layout_ = layout;
    for (const auto& e : layout_entries(layout)) m.params_.add(e.path, init_tensor<T>(e, seed));
    m.bind();
    return m;
  }

  [[nodiscard]] const ModelLayout& layout() const { return layout_; }
  [[nodiscard]] const ModelConfig& config() const { return layout_.model; }
  [[nodiscard]] ParamTree<T>& params() { return params_; }
  [[nodiscard]] const ParamTree<T>& params() const { return params_; }
  [[nodiscard]] ParamManifest manifest() const { return params_.manifest(); }

  [[nodiscard]] bool training() const { return training_; }
  void train(bool flag = true) { training_ = flag; }
  void eval() { training_ = false; }

  // Options for a tape whose dropout behaviour follows the model's mode.
  [[nodiscard]] TapeOptions tape_options(std::uint64_t seed = 0, std::uint64_t stream = 0) const {
    TapeOptions o;
    o.seed = seed;
    o.stream = stream;
    o.training = training_;
    o.record = true;
    return o;
  }

  [[nodiscard]] bool grafted() const { return input_module_.has_value(); }
  [[nodiscard]] InputModule<T>& input_module() {
    if (!input_module_) throw StateError("model has no input module");
    return *input_module_;
  }
  [[nodiscard]] std::size_t source_vocab_size() const {
    return layout_.input_module ? layout_.input_module->src_vocab_size : layout_.model.vocab_size;
  }

  // Appends one adapter after the last sublayer of every selected layer. The
  // new adapters are identity maps until trained.
  void insert_adapters(AdapterPlacement where, const AdapterConfig& config, std::uint64_t seed) {
    config.validate();
    if (where == AdapterPlacement::kNone) return;
    const bool enc = where == AdapterPlacement::kEncoder || where == AdapterPlacement::kBoth;
    const bool dec = where == AdapterPlacement::kDecoder || where == AdapterPlacement::kBoth;
    if ((enc && layout_.encoder_adapters()) || (dec && layout_.decoder_adapters())) {
      throw StateError("insert_adapters: adapters already present at the requested locations");
    }
    if (layout_.adapters != AdapterPlacement::kNone && !(layout_.adapter == config)) {
      throw StateError("insert_adapters: existing adapters use a different adapter config");
    }
    ModelLayout next = layout_;
    next.adapter = config;
    const bool had_enc = layout_.encoder_adapters(), had_dec = layout_.decoder_adapters();
    next.adapters = (enc || had_enc) && (dec || had_dec) ? AdapterPlacement::kBoth
                    : (enc || had_enc)                   ? AdapterPlacement::kEncoder
                                                         : AdapterPlacement::kDecoder;
    add_missing(next, seed);
  }

  // Places an input module in front of the encoder. Source ids now index the
  // module's vocabulary; the target side is unchanged.
  void graft(const InputModuleConfig& config, std::uint64_t seed) {
    if (input_module_) throw StateError("graft: model already has an input module");
    if (config.use_projection == false && config.d_s != layout_.model.d_model) {
      throw DimensionError("graft: input module width " + std::to_string(config.d_s) +
                           " does not match body d_model " + std::to_string(layout_.model.d_model));
    }
    ModelLayout next = layout_;
    next.input_module = config;
    if (config.match_body_scale) {
      next.input_module->alpha = body_embedding_rms();
      next.input_module->match_body_scale = false;
    }
    add_missing(next, seed);
  }

  // Root-mean-square coordinate of the body's scaled token embeddings. Using it
  // as alpha puts the input module's output on the same per-coordinate scale.
  [[nodiscard]] double body_embedding_rms() const {
    double sum = 0.0;
    for (T v : embed_tokens_.data()) sum += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(sum / static_cast<double>(embed_tokens_.numel())) * static_cast<double>(embed_scale());
  }

  // Token embeddings scaled by sqrt(d_model), or the input module's output when grafted.
  Tensor<T> embed_source(Tape<T>& tape, const TokenBatch& src) const {
    check_ids(src, source_vocab_size(), "source");
    if (input_module_) return input_module_->forward(tape, src);
    return embed_body_tokens(tape, src);
  }

  Tensor<T> embed_body_tokens(Tape<T>& tape, const TokenBatch& tokens) const {
    check_ids(tokens, layout_.model.vocab_size, "target-side");
    return scale(tape, embedding_lookup(tape, embed_tokens_, tokens.ids), embed_scale());
  }

  // Encoder over pre-embedded source rows [batch * len, d_model].
  Tensor<T> encode_embedded(Tape<T>& tape, const Tensor<T>& embedded, const TokenBatch& src) const {
    const auto& c = layout_.model;
    if (embedded.rank() != 2 || embedded.dim(0) != src.rows() || embedded.dim(1) != c.d_model) {
      throw DimensionError("encode: embedded source " + shape_str(embedded.shape()) + " does not match batch of " +
                           std::to_string(src.rows()) + " rows x d_model " + std::to_string(c.d_model));
    }
    check_positions(src.len);
    auto x = add(tape, embedded, embedding_lookup(tape, enc_positions_, src.positions()));
    x = dropout(tape, x, c.dropout);
    const auto mask = attention_mask<T>(src.batch, src.len, src.lengths, src.len, false);
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
      x = encoder_layer(tape, encoder_[i], x, src, c.n_heads, mask, rates());
      if (enc_adapters_.size() > i) x = adapter_forward(tape, enc_adapters_[i], layout_.adapter, x);
    }
    return x;
  }

  Tensor<T> encode(Tape<T>& tape, const TokenBatch& src) const {
    return encode_embedded(tape, embed_source(tape, src), src);
  }

  // Decoder logits [batch * tgt_len, vocab] given encoder memory.
  Tensor<T> decode(Tape<T>& tape, const Tensor<T>& memory, const TokenBatch& src, const TokenBatch& tgt_in) const {
    const auto& c = layout_.model;
    if (tgt_in.batch != src.batch) throw DimensionError("decode: source and target batch sizes differ");
    check_positions(tgt_in.len);
    auto x = add(tape, embed_body_tokens(tape, tgt_in), embedding_lookup(tape, dec_positions_, tgt_in.positions()));
    x = dropout(tape, x, c.dropout);
    const auto self_mask = attention_mask<T>(tgt_in.batch, tgt_in.len, tgt_in.lengths, tgt_in.len, true);
    const auto cross_mask = attention_mask<T>(tgt_in.batch, tgt_in.len, src.lengths, src.len, false);
    const AttentionShape self_shape{tgt_in.batch, tgt_in.len, tgt_in.len, c.n_heads};
    const AttentionShape cross_shape{tgt_in.batch, tgt_in.len, src.len, c.n_heads};
    const auto r = rates();
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
      const auto& p = decoder_[i];
      auto a = multi_head_attention(tape, p.self_attn, x, x, self_shape, self_mask, r.attention_dropout);
      x = residual_norm(tape, x, a, p.self_attn_norm, r.dropout, r.norm_eps);
      a = multi_head_attention(tape, p.cross_attn, x, memory, cross_shape, cross_mask, r.attention_dropout);
      x = residual_norm(tape, x, a, p.cross_attn_norm, r.dropout, r.norm_eps);
      x = residual_norm(tape, x, feed_forward(tape, p.ffn, x), p.final_norm, r.dropout, r.norm_eps);
      if (dec_adapters_.size() > i) x = adapter_forward(tape, dec_adapters_[i], layout_.adapter, x);
    }
    if (c.tie_embeddings) return matmul(tape, x, embed_tokens_, /*transpose_b=*/true);
    return matmul(tape, x, output_proj_);
  }

  Tensor<T> logits(Tape<T>& tape, const PairBatch& batch) const {
    return decode(tape, encode(tape, batch.src), batch.src, batch.tgt_in);
  }

  // Label-smoothed cross-entropy over shifted targets.
  Tensor<T> loss(Tape<T>& tape, const PairBatch& batch, double label_smoothing, double normalizer = 0.0) const {
    if (batch.src.batch == 0) throw ContractError("loss: empty batch");
    auto l = logits(tape, batch);
    CrossEntropyOptions opts{label_smoothing, Special::kPad, normalizer};
    return cross_entropy_label_smoothed(tape, l, batch.tgt_out, opts);
  }

  // Summed target NLL (no smoothing) per sentence, computed in eval mode.
  std::vector<double> sentence_nll(const PairBatch& batch) const {
    TapeOptions o;
    o.record = false;
    Tape<T> tape(o);
    auto l = logits(tape, batch);
    const std::size_t vocab = l.dim(1);
    std::vector<double> out(batch.src.batch, 0.0);
    auto lv = l.data();
    for (std::size_t r = 0; r < batch.tgt_out.size(); ++r) {
      const int t = batch.tgt_out[r];
      if (t == Special::kPad) continue;
      const T* row = lv.data() + r * vocab;
      const T mx = *std::max_element(row, row + vocab);
      double z = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j] - mx));
      out[r / batch.tgt_in.len] += std::log(z) + static_cast<double>(mx) - static_cast<double>(row[t]);
    }
    return out;
  }

  // Deep copy of parameters, flags and mode.
  [[nodiscard]] Seq2SeqModel clone() const {
    Seq2SeqModel m;
    m.layout_ = layout_;
    m.training_ = training_;
    for (const auto& [path, t] : params_) {
      auto c = t.clone();
      c.set_requires_grad(t.requires_grad());
      m.params_.add(path, c);
    }
    m.bind();
    return m;
  }

  // Overwrites parameter values from another model with the same layout.
  void copy_values_from(const Seq2SeqModel& other) {
    for (auto& [path, t] : params_) {
      const auto& src = other.params_.at(path);
      if (src.shape() != t.shape()) throw DimensionError("copy_values_from: shape mismatch at " + path);
      std::copy(src.data().begin(), src.data().end(), t.data().begin());
    }
  }

  [[nodiscard]] T embed_scale() const { return std::sqrt(static_cast<T>(layout_.model.d_model)); }

 private:
  Seq2SeqModel() = default;

  [[nodiscard]] LayerRates rates() const {
    return {layout_.model.dropout, layout_.model.attention_dropout, layout_.model.norm_eps};
  }

  void check_positions(std::size_t len) const {
    if (len > layout_.model.max_positions) {
      throw RangeError("sequence length " + std::to_string(len) + " exceeds max_positions " +
                       std::to_string(layout_.model.max_positions));
    }
  }

  static void check_ids(const TokenBatch& b, std::size_t vocab, const char* side) {
    for (int id : b.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
        throw IndexError(std::string(side) + " token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(vocab));
      }
    }
  }

  void add_missing(const ModelLayout& next, std::uint64_t seed) {
    for (const auto& e : layout_entries(next)) {
      if (!params_.contains(e.path)) params_.add(e.path, init_tensor<T>(e, seed));
    }
    layout_ = next;
    bind();
  }

  void bind() {
    const auto& c = layout_.model;
    embed_tokens_ = params_.at("embed/tokens");
    enc_positions_ = params_.at("encoder/embed_positions");
    dec_positions_ = params_.at("decoder/embed_positions");
    encoder_.clear();
    decoder_.clear();
    enc_adapters_.clear();
    dec_adapters_.clear();
    for (std::size_t i = 0; i < c.n_enc_layers; ++i) {
      const auto p = layer_prefix("encoder", i);
      encoder_.push_back(EncoderLayerParams<T>::bind(params_, p));
      if (layout_.encoder_adapters()) enc_adapters_.push_back(AdapterParams<T>::bind(params_, p + "/adapter"));
    }
    for (std::size_t i = 0; i < c.n_dec_layers; ++i) {
      const auto p = layer_prefix("decoder", i);
      decoder_.push_back(DecoderLayerParams<T>::bind(params_, p));
      if (layout_.decoder_adapters()) dec_adapters_.push_back(AdapterParams<T>::bind(params_, p + "/adapter"));
    }
    if (!c.tie_embeddings) output_proj_ = params_.at("decoder/output_proj/weight");
    if (layout_.input_module) {
      input_module_.emplace(params_, *layout_.input_module, c.d_model);
    } else {
      input_module_.reset();
    }
  }

  ModelLayout layout_;
  ParamTree<T> params_;
  bool training_ = true;
  Tensor<T> embed_tokens_;
  Tensor<T> enc_positions_;
  Tensor<T> dec_positions_;
  Tensor<T> output_proj_;
  std::vector<EncoderLayerParams<T>> encoder_;
  std::vector<DecoderLayerParams<T>> decoder_;
  std::vector<AdapterParams<T>> enc_adapters_;
  std::vector<AdapterParams<T>> dec_adapters_;
  std::optional<InputModule<T>> input_module_;
};

// Convenience free functions mirroring the model methods.
template <typename T = float>
Seq2SeqModel<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  return Seq2SeqModel<T>::build(config, seed);
}

}  // namespace graftmt

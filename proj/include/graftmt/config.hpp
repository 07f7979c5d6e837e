// Structural configuration for the body transformer, adapters and the grafted
// input module, with JSON round-tripping and the shape-only parameter layout.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "graftmt/errors.hpp"
#include "graftmt/param_tree.hpp"

namespace graftmt {

using json = nlohmann::json;

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 0;  // 0: 4 * d_model
  std::size_t vocab_size = 256;
  std::size_t max_positions = 512;
  bool tie_embeddings = true;
  double dropout = 0.1;
  double attention_dropout = 0.0;
  double norm_eps = 1e-5;
  double init_std = 0.0;  // projection init; 0: 1/sqrt(fan_in)

  static ModelConfig toy() { return {}; }

  static ModelConfig bart() {
    ModelConfig c;
    c.d_model = 1024;
    c.n_enc_layers = c.n_dec_layers = 12;
    c.n_heads = 16;
    c.vocab_size = 40000;
    c.max_positions = 1024;
    c.dropout = 0.3;
    c.init_std = 0.02;
    return c;
  }

  static ModelConfig mbart() {
    ModelConfig c = bart();
    c.vocab_size = 250000;
    return c;
  }

  static ModelConfig profile(const std::string& name) {
    if (name == "toy") return toy();
    if (name == "bart") return bart();
    if (name == "mbart") return mbart();
    throw ConfigError("unknown profile '" + name + "' (expected toy, bart or mbart)");
  }

  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
    if (d_model == 0 || n_heads == 0) fail("d_model and n_heads must be positive");
    if (d_model % n_heads != 0) {
      fail("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
           std::to_string(n_heads) + ")");
    }
    if (n_enc_layers == 0 || n_dec_layers == 0) fail("layer counts must be positive");
    if (vocab_size < 5) fail("vocab_size must cover the special tokens");
    if (max_positions == 0) fail("max_positions must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0,1)");
    if (!(attention_dropout >= 0.0 && attention_dropout < 1.0)) fail("attention_dropout must lie in [0,1)");
    if (!(init_std >= 0.0)) fail("init_std must be >= 0");
  }

  [[nodiscard]] std::size_t ffn() const { return d_ffn ? d_ffn : 4 * d_model; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class AdapterKind { kPlain, kGlu };
enum class AdapterPlacement { kNone, kEncoder, kDecoder, kBoth };

struct AdapterConfig {
  AdapterKind kind = AdapterKind::kPlain;
  std::size_t d_hidden = 16;
  double dropout = 0.1;

  // Bottleneck widths: 128 plain; GLU keeps the parameter count level with
  // round-half-even(2/3 * 128) = 85.
  static AdapterConfig paper(AdapterKind kind) {
    return {kind, kind == AdapterKind::kGlu ? glu_width(128) : 128, 0.1};
  }
  static AdapterConfig toy(AdapterKind kind) {
    return {kind, kind == AdapterKind::kGlu ? glu_width(16) : 16, 0.1};
  }
  static std::size_t glu_width(std::size_t plain) {
    return static_cast<std::size_t>(std::nearbyint(2.0 * static_cast<double>(plain) / 3.0));
  }

  void validate() const {
    if (d_hidden == 0) throw ConfigError("adapter config: d_hidden must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("adapter config: dropout must lie in [0,1)");
  }

  friend bool operator==(const AdapterConfig&, const AdapterConfig&) = default;
};

enum class SinusoidScheme { kHalfSplit, kInterleaved };

struct InputModuleConfig {
  std::size_t d_s = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 0;  // 0: round(d_s / 16)
  std::size_t d_ffn = 0;    // 0: 4 * d_s
  std::size_t src_vocab_size = 256;
  std::size_t max_positions = 512;
  double alpha = 0.0;  // 0: sqrt(d_model of the body)
  // Replace alpha at graft time by the RMS coordinate of the body's scaled
  // token embeddings; the measured value is stored in alpha.
  bool match_body_scale = false;
  bool add_fixed_per_layer = true;
  SinusoidScheme sinusoid_scheme = SinusoidScheme::kHalfSplit;
  double dropout = 0.2;
  double attention_dropout = 0.2;
  // Ablation switches. Turning both off with alpha=1 and d_s equal to the
  // body width reduces the module to a plain replacement embedding encoder.
  bool use_output_norm = true;
  bool use_projection = true;

  static InputModuleConfig toy(std::size_t src_vocab, std::size_t d_body = 64) {
    InputModuleConfig c;
    c.d_s = d_body / 2;
    c.src_vocab_size = src_vocab;
    return c;
  }
  static InputModuleConfig paper(std::size_t src_vocab = 5000) {
    InputModuleConfig c;
    c.d_s = 512;
    c.n_layers = 6;
    c.src_vocab_size = src_vocab;
    c.max_positions = 1024;
    return c;
  }

  [[nodiscard]] std::size_t heads() const {
    if (n_heads) return n_heads;
    const auto h = static_cast<std::size_t>(std::lround(static_cast<double>(d_s) / 16.0));
    return h == 0 ? 1 : h;
  }
  [[nodiscard]] std::size_t ffn() const { return d_ffn ? d_ffn : 4 * d_s; }
  [[nodiscard]] double resolved_alpha(std::size_t d_body) const {
    return alpha > 0.0 ? alpha : std::sqrt(static_cast<double>(d_body));
  }

  void validate(std::size_t d_body) const {
    auto fail = [](const std::string& what) { throw ConfigError("input module config: " + what); };
    if (d_s < 4 || d_s % 2 != 0) fail("d_s must be even and >= 4");
    if (d_s % heads() != 0) fail("d_s must be divisible by the head count");
    if (n_layers == 0) fail("n_layers must be positive");
    if (src_vocab_size < 5) fail("src_vocab_size must cover the special tokens");
    if (!use_projection && d_s != d_body) {
      throw DimensionError("input module: projection disabled but d_s (" + std::to_string(d_s) +
                           ") != body d_model (" + std::to_string(d_body) + ")");
    }
    if (!(dropout >= 0.0 && dropout < 1.0) || !(attention_dropout >= 0.0 && attention_dropout < 1.0)) {
      fail("dropout must lie in [0,1)");
    }
  }

  friend bool operator==(const InputModuleConfig&, const InputModuleConfig&) = default;
};

// Everything that determines the parameter inventory of a model.
struct ModelLayout {
  ModelConfig model;
  AdapterPlacement adapters = AdapterPlacement::kNone;
  AdapterConfig adapter;
  std::optional<InputModuleConfig> input_module;

  [[nodiscard]] bool encoder_adapters() const {
    return adapters == AdapterPlacement::kEncoder || adapters == AdapterPlacement::kBoth;
  }
  [[nodiscard]] bool decoder_adapters() const {
    return adapters == AdapterPlacement::kDecoder || adapters == AdapterPlacement::kBoth;
  }

  friend bool operator==(const ModelLayout&, const ModelLayout&) = default;
};

NLOHMANN_JSON_SERIALIZE_ENUM(AdapterKind, {{AdapterKind::kPlain, "plain"}, {AdapterKind::kGlu, "glu"}})
NLOHMANN_JSON_SERIALIZE_ENUM(AdapterPlacement, {{AdapterPlacement::kNone, "none"},
                                                {AdapterPlacement::kEncoder, "encoder"},
                                                {AdapterPlacement::kDecoder, "decoder"},
                                                {AdapterPlacement::kBoth, "both"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SinusoidScheme, {{SinusoidScheme::kHalfSplit, "half-split"},
                                              {SinusoidScheme::kInterleaved, "interleaved"}})

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, d_model, n_enc_layers, n_dec_layers,
                                                n_heads, d_ffn, vocab_size, max_positions,
                                                tie_embeddings, dropout, attention_dropout, norm_eps,
                                                init_std)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AdapterConfig, kind, d_hidden, dropout)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(InputModuleConfig, d_s, n_layers, n_heads, d_ffn,
                                                src_vocab_size, max_positions, alpha, match_body_scale,
                                                add_fixed_per_layer, sinusoid_scheme, dropout,
                                                attention_dropout, use_output_norm, use_projection)

inline void to_json(json& j, const ModelLayout& l) {
  j = json{{"model", l.model}, {"adapters", l.adapters}, {"adapter", l.adapter}};
  j["input_module"] = l.input_module ? json(*l.input_module) : json(nullptr);
}

inline void from_json(const json& j, ModelLayout& l) {
  l.model = j.at("model").get<ModelConfig>();
  l.adapters = j.value("adapters", AdapterPlacement::kNone);
  if (j.contains("adapter")) l.adapter = j.at("adapter").get<AdapterConfig>();
  if (j.contains("input_module") && !j.at("input_module").is_null()) {
    l.input_module = j.at("input_module").get<InputModuleConfig>();
  } else {
    l.input_module.reset();
  }
}

enum class InitKind { kNormal, kEmbedding, kZeros, kOnes };

struct LayoutEntry {
  std::string path;
  Shape shape;
  InitKind init;
  double stddev = 0.0;
};

namespace detail {

inline double weight_std(double init_std, std::size_t fan_in) {
  return init_std > 0.0 ? init_std : 1.0 / std::sqrt(static_cast<double>(fan_in));
}

inline void push_linear(std::vector<LayoutEntry>& out, const std::string& prefix, std::size_t in,
                        std::size_t outdim, double init_std, bool bias = true) {
  out.push_back({prefix + "/weight", {in, outdim}, InitKind::kNormal, weight_std(init_std, in)});
  if (bias) out.push_back({prefix + "/bias", {outdim}, InitKind::kZeros});
}

inline void push_norm(std::vector<LayoutEntry>& out, const std::string& prefix, std::size_t d) {
  out.push_back({prefix + "/weight", {d}, InitKind::kOnes});
  out.push_back({prefix + "/bias", {d}, InitKind::kZeros});
}

inline void push_attention(std::vector<LayoutEntry>& out, const std::string& prefix, std::size_t d, double init_std) {
  for (const char* proj : {"q_proj", "k_proj", "v_proj", "out_proj"}) push_linear(out, prefix + "/" + proj, d, d, init_std);
}

inline void push_adapter(std::vector<LayoutEntry>& out, const std::string& prefix, std::size_t d,
                         const AdapterConfig& a, double init_std) {
  const double sd = weight_std(init_std, d);
  out.push_back({prefix + "/down/weight", {d, a.d_hidden}, InitKind::kNormal, sd});
  if (a.kind == AdapterKind::kGlu) out.push_back({prefix + "/gate/weight", {d, a.d_hidden}, InitKind::kNormal, sd});
  out.push_back({prefix + "/up/weight", {a.d_hidden, d}, InitKind::kZeros});
}

inline void push_encoder_layer(std::vector<LayoutEntry>& out, const std::string& prefix, std::size_t d,
                               std::size_t ffn, double init_std) {
  push_attention(out, prefix + "/self_attn", d, init_std);
  push_norm(out, prefix + "/self_attn_norm", d);
  push_linear(out, prefix + "/ffn/fc1", d, ffn, init_std);
  push_linear(out, prefix + "/ffn/fc2", ffn, d, init_std);
  push_norm(out, prefix + "/final_norm", d);
}

}  // namespace detail

inline std::string layer_prefix(const std::string& stack, std::size_t i) {
  return stack + "/layer" + std::to_string(i);
}

// Parameter inventory in construction order.
inline std::vector<LayoutEntry> layout_entries(const ModelLayout& layout) {
  using namespace detail;
  const auto& c = layout.model;
  const std::size_t d = c.d_model;
  const double embed_std = 1.0 / std::sqrt(static_cast<double>(d));
  // Positions start at the scale of the sqrt(d)-scaled token embeddings.
  const double pos_std = 1.0;
  std::vector<LayoutEntry> out;
  out.push_back({"embed/tokens", {c.vocab_size, d}, InitKind::kEmbedding, embed_std});
  out.push_back({"encoder/embed_positions", {c.max_positions, d}, InitKind::kNormal, pos_std});
  out.push_back({"decoder/embed_positions", {c.max_positions, d}, InitKind::kNormal, pos_std});
  for (std::size_t i = 0; i < c.n_enc_layers; ++i) {
    const auto p = layer_prefix("encoder", i);
    push_encoder_layer(out, p, d, c.ffn(), c.init_std);
    if (layout.encoder_adapters()) push_adapter(out, p + "/adapter", d, layout.adapter, c.init_std);
  }
  for (std::size_t i = 0; i < c.n_dec_layers; ++i) {
    const auto p = layer_prefix("decoder", i);
    push_attention(out, p + "/self_attn", d, c.init_std);
    push_norm(out, p + "/self_attn_norm", d);
    push_attention(out, p + "/cross_attn", d, c.init_std);
    push_norm(out, p + "/cross_attn_norm", d);
    push_linear(out, p + "/ffn/fc1", d, c.ffn(), c.init_std);
    push_linear(out, p + "/ffn/fc2", c.ffn(), d, c.init_std);
    push_norm(out, p + "/final_norm", d);
    if (layout.decoder_adapters()) push_adapter(out, p + "/adapter", d, layout.adapter, c.init_std);
  }
  if (!c.tie_embeddings) {
    out.push_back({"decoder/output_proj/weight", {d, c.vocab_size}, InitKind::kNormal, weight_std(c.init_std, d)});
  }
  if (layout.input_module) {
    const auto& im = *layout.input_module;
    out.push_back({"input_module/embed_tokens", {im.src_vocab_size, im.d_s}, InitKind::kEmbedding,
                   1.0 / std::sqrt(static_cast<double>(im.d_s))});
    // The module's own positions start small, like its unscaled token table;
    // the fixed sinusoids carry the early position signal.
    out.push_back({"input_module/embed_positions", {im.max_positions, im.d_s}, InitKind::kNormal,
                   1.0 / std::sqrt(static_cast<double>(im.d_s))});
    for (std::size_t i = 0; i < im.n_layers; ++i) {
      push_encoder_layer(out, layer_prefix("input_module", i), im.d_s, im.ffn(), c.init_std);
    }
    if (im.use_projection) {
      out.push_back({"input_module/proj/weight", {im.d_s, d}, InitKind::kNormal, weight_std(c.init_std, im.d_s)});
    }
    if (im.use_output_norm) push_norm(out, "input_module/out_norm", d);
  }
  return out;
}

// Shape-only manifest (sorted by path); every parameter starts trainable.
inline ParamManifest layout_manifest(const ModelLayout& layout) {
  ParamManifest m;
  for (auto& e : layout_entries(layout)) m.push_back({e.path, e.shape, true});
  std::sort(m.begin(), m.end(), [](const ParamEntry& a, const ParamEntry& b) { return a.path < b.path; });
  return m;
}

}  // namespace graftmt

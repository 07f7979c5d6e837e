// Freezing policies over parameter paths, the named fine-tuning recipes, and
// exact parameter / training-memory accounting.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "graftmt/config.hpp"
#include "graftmt/model.hpp"
#include "graftmt/param_tree.hpp"

namespace graftmt {

struct FreezeRule {
  std::string pattern;
  bool trainable = true;

  friend bool operator==(const FreezeRule&, const FreezeRule&) = default;
};

// Ordered pattern -> flag rules; the last matching rule wins and unmatched
// paths stay trainable.
struct FreezePolicy {
  std::string name;
  std::vector<FreezeRule> rules;

  [[nodiscard]] bool trainable(std::string_view path) const {
    bool flag = true;
    for (const auto& r : rules)
      if (path_matches(r.pattern, path)) flag = r.trainable;
    return flag;
  }

  void validate() const {
    for (const auto& r : rules) validate_pattern(r.pattern);
  }

  FreezePolicy& freeze(std::string pattern) {
    rules.push_back({std::move(pattern), false});
    return *this;
  }
  FreezePolicy& unfreeze(std::string pattern) {
    rules.push_back({std::move(pattern), true});
    return *this;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(FreezeRule, pattern, trainable)

// Structural requirements that come with a freezing policy.
struct Recipe {
  std::string name;
  FreezePolicy policy;
  AdapterPlacement adapters = AdapterPlacement::kNone;
  AdapterKind adapter_kind = AdapterKind::kPlain;
  bool requires_graft = false;
  // Fine-grained decoder subset this recipe unfreezes, for bias-free reporting.
  std::vector<std::string> subset;
};

inline void to_json(json& j, const Recipe& r) {
  j = json{{"name", r.name},
           {"rules", r.policy.rules},
           {"adapters", r.adapters},
           {"adapter_kind", r.adapter_kind},
           {"requires_graft", r.requires_graft},
           {"subset", r.subset}};
}

inline void from_json(const json& j, Recipe& r) {
  r.name = j.at("name").get<std::string>();
  r.policy.name = r.name;
  r.policy.rules = j.at("rules").get<std::vector<FreezeRule>>();
  r.adapters = j.value("adapters", AdapterPlacement::kNone);
  r.adapter_kind = j.value("adapter_kind", AdapterKind::kPlain);
  r.requires_graft = j.value("requires_graft", false);
  r.subset = j.value("subset", std::vector<std::string>{});
  r.policy.validate();
}

namespace patterns {
inline constexpr const char* kAll = "**";
inline constexpr const char* kNorms = "**/*_norm/*";
inline constexpr const char* kAdapters = "**/adapter/**";
inline constexpr const char* kTokenEmbeddings = "embed/**";
inline constexpr const char* kPositions = "*/embed_positions";
}  // namespace patterns

inline std::vector<std::string> recipe_names() {
  return {"finetune-all",
          "bart-frozen",
          "bart-frozen+enc-adapters",
          "mbart-freeze-decoder",
          "mbart-freeze-encoder",
          "mbart-freeze-decoder+decoder-adapters",
          "mbart-freeze-encoder+encoder-adapters",
          "ft-enc-attn",
          "ft-self-attn",
          "ft-last3"};
}

namespace detail {

// Freeze everything in `frozen_stack` except norms, embeddings and the first
// layer's self-attention of both stacks.
inline FreezePolicy mbart_freeze(const std::string& name, const std::string& frozen_stack) {
  FreezePolicy p{name, {}};
  p.unfreeze(patterns::kAll)
      .freeze(frozen_stack + "/**")
      .unfreeze(patterns::kNorms)
      .unfreeze(patterns::kTokenEmbeddings)
      .unfreeze(patterns::kPositions)
      .unfreeze("encoder/layer0/self_attn/**")
      .unfreeze("decoder/layer0/self_attn/**")
      .unfreeze(patterns::kAdapters);
  return p;
}

}  // namespace detail

// Named recipe for a body with `config`. Decoder-subset recipes build on
// freeze-decoder + decoder adapters.
inline Recipe make_recipe(const std::string& name, const ModelConfig& config) {
  Recipe r;
  r.name = name;
  if (name == "finetune-all") {
    r.policy = FreezePolicy{name, {{patterns::kAll, true}}};
  } else if (name == "bart-frozen" || name == "bart-frozen+enc-adapters") {
    r.policy.name = name;
    r.policy.freeze(patterns::kAll)
        .unfreeze("input_module/**")
        .unfreeze(patterns::kNorms)
        .unfreeze("encoder/layer0/self_attn/**")
        .unfreeze(patterns::kAdapters);
    r.requires_graft = true;
    if (name == "bart-frozen+enc-adapters") r.adapters = AdapterPlacement::kEncoder;
  } else if (name == "mbart-freeze-decoder" || name == "mbart-freeze-decoder+decoder-adapters") {
    r.policy = detail::mbart_freeze(name, "decoder");
    if (name != "mbart-freeze-decoder") r.adapters = AdapterPlacement::kDecoder;
  } else if (name == "mbart-freeze-encoder" || name == "mbart-freeze-encoder+encoder-adapters") {
    r.policy = detail::mbart_freeze(name, "encoder");
    if (name != "mbart-freeze-encoder") r.adapters = AdapterPlacement::kEncoder;
  } else if (name == "ft-enc-attn" || name == "ft-self-attn" || name == "ft-last3") {
    r.policy = detail::mbart_freeze(name, "decoder");
    r.adapters = AdapterPlacement::kDecoder;
    if (name == "ft-enc-attn") {
      r.subset = {"decoder/*/cross_attn/**"};
    } else if (name == "ft-self-attn") {
      r.subset = {"decoder/*/self_attn/**"};
    } else {
      const std::size_t n = config.n_dec_layers;
      for (std::size_t i = n >= 3 ? n - 3 : 0; i < n; ++i) {
        const auto p = layer_prefix("decoder", i);
        for (const char* sub : {"self_attn", "cross_attn", "ffn"}) r.subset.push_back(p + "/" + sub + "/**");
      }
    }
    for (const auto& s : r.subset) r.policy.unfreeze(s);
    r.policy.unfreeze(patterns::kNorms);
    r.policy.unfreeze(patterns::kAdapters);
  } else {
    // Short aliases used in tables and on the command line.
    if (name == "+decoder-adapters" || name == "freeze-decoder+decoder-adapters") {
      return make_recipe("mbart-freeze-decoder+decoder-adapters", config);
    }
    if (name == "+encoder-adapters" || name == "freeze-encoder+encoder-adapters") {
      return make_recipe("mbart-freeze-encoder+encoder-adapters", config);
    }
    if (name == "freeze-decoder") return make_recipe("mbart-freeze-decoder", config);
    if (name == "freeze-encoder") return make_recipe("mbart-freeze-encoder", config);
    throw ConfigError("unknown recipe '" + name + "'");
  }
  return r;
}

inline Recipe load_recipe_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open recipe file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("recipe file '" + path + "': " + e.what());
  }
  return j.get<Recipe>();
}

// Recipe by name, or from a JSON file when `name_or_file` names one.
inline Recipe resolve_recipe(const std::string& name_or_file, const ModelConfig& config) {
  if (name_or_file.size() > 5 && name_or_file.ends_with(".json")) return load_recipe_file(name_or_file);
  return make_recipe(name_or_file, config);
}

inline void apply_policy(ParamManifest& manifest, const FreezePolicy& policy) {
  policy.validate();
  for (auto& e : manifest) e.trainable = policy.trainable(e.path);
}

// Sets requires_grad on every parameter; frozen tensors lose any grad buffer.
template <typename T>
void apply_policy(Seq2SeqModel<T>& model, const FreezePolicy& policy) {
  policy.validate();
  for (auto& [path, t] : model.params()) t.set_requires_grad(policy.trainable(path));
}

// Inserts the adapters a recipe needs (if missing) and applies its policy.
template <typename T>
void apply_recipe(Seq2SeqModel<T>& model, const Recipe& recipe, const AdapterConfig& adapter,
                  std::uint64_t seed) {
  if (recipe.requires_graft && !model.grafted()) {
    throw ConfigError("recipe '" + recipe.name + "' requires a grafted input module");
  }
  if (recipe.adapters != AdapterPlacement::kNone) {
    AdapterConfig a = adapter;
    a.kind = recipe.adapter_kind;
    const auto& have = model.layout();
    const bool need_enc = recipe.adapters == AdapterPlacement::kEncoder || recipe.adapters == AdapterPlacement::kBoth;
    const bool need_dec = recipe.adapters == AdapterPlacement::kDecoder || recipe.adapters == AdapterPlacement::kBoth;
    if (need_enc && !have.encoder_adapters()) model.insert_adapters(AdapterPlacement::kEncoder, a, seed);
    if (need_dec && !model.layout().decoder_adapters()) model.insert_adapters(AdapterPlacement::kDecoder, a, seed);
  }
  apply_policy(model, recipe.policy);
}

inline ModelLayout recipe_layout(ModelLayout layout, const Recipe& recipe, const AdapterConfig& adapter) {
  if (recipe.adapters == AdapterPlacement::kNone) return layout;
  const bool enc = layout.encoder_adapters() || recipe.adapters == AdapterPlacement::kEncoder ||
                   recipe.adapters == AdapterPlacement::kBoth;
  const bool dec = layout.decoder_adapters() || recipe.adapters == AdapterPlacement::kDecoder ||
                   recipe.adapters == AdapterPlacement::kBoth;
  layout.adapters = enc && dec ? AdapterPlacement::kBoth : enc ? AdapterPlacement::kEncoder : AdapterPlacement::kDecoder;
  layout.adapter = adapter;
  layout.adapter.kind = recipe.adapter_kind;
  return layout;
}

enum class CountMode {
  kAll,       // every scalar, weights and biases separately
  kBiasFree,  // only weight matrices, the convention of "4 d^2 per attention block"
};

enum class Membership { kAny, kTrainable, kFrozen };

inline std::size_t count_params(const ParamManifest& manifest, std::string_view selector,
                                CountMode mode = CountMode::kAll, Membership membership = Membership::kAny) {
  validate_pattern(selector);
  std::size_t n = 0;
  for (const auto& e : manifest) {
    if (membership == Membership::kTrainable && !e.trainable) continue;
    if (membership == Membership::kFrozen && e.trainable) continue;
    if (mode == CountMode::kBiasFree && !e.is_matrix()) continue;
    if (path_matches(selector, e.path)) n += e.numel();
  }
  return n;
}

template <typename T>
std::size_t count_params(const Seq2SeqModel<T>& model, std::string_view selector, CountMode mode = CountMode::kAll,
                         Membership membership = Membership::kAny) {
  return count_params(model.manifest(), selector, mode, membership);
}

// Bias-free trainable weights inside a recipe's decoder subset.
inline std::size_t subset_weight_count(const ParamManifest& manifest, const Recipe& recipe) {
  std::size_t n = 0;
  for (const auto& e : manifest) {
    if (!e.trainable || !e.is_matrix()) continue;
    if (std::any_of(recipe.subset.begin(), recipe.subset.end(),
                    [&](const std::string& s) { return path_matches(s, e.path); })) {
      n += e.numel();
    }
  }
  return n;
}

// Layer-norm modules in the body (two per encoder layer, three per decoder layer).
inline std::size_t body_norm_modules(const ModelConfig& c) { return 2 * c.n_enc_layers + 3 * c.n_dec_layers; }

enum class OptimizerKind { kAdam, kSgd };

struct MemoryReport {
  std::size_t total_params = 0;
  std::size_t trainable_params = 0;
  std::size_t bytes_params_total = 0;
  std::size_t bytes_grads = 0;
  std::size_t bytes_optimizer_state = 0;
  std::size_t bytes_total = 0;
  double trainable_fraction = 0.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(MemoryReport, total_params, trainable_params, bytes_params_total, bytes_grads,
                                   bytes_optimizer_state, bytes_total, trainable_fraction)

// Parameter, gradient and optimizer-state bytes. Activations are not modelled.
inline MemoryReport memory_report(const ParamManifest& manifest, OptimizerKind optimizer,
                                  std::size_t bytes_per_scalar = 4) {
  MemoryReport r;
  for (const auto& e : manifest) {
    r.total_params += e.numel();
    if (e.trainable) r.trainable_params += e.numel();
  }
  r.bytes_params_total = r.total_params * bytes_per_scalar;
  r.bytes_grads = r.trainable_params * bytes_per_scalar;
  r.bytes_optimizer_state = optimizer == OptimizerKind::kAdam ? 2 * r.bytes_grads : 0;
  r.bytes_total = r.bytes_params_total + r.bytes_grads + r.bytes_optimizer_state;
  r.trainable_fraction =
      r.total_params ? static_cast<double>(r.trainable_params) / static_cast<double>(r.total_params) : 0.0;
  return r;
}

template <typename T>
MemoryReport memory_report(const Seq2SeqModel<T>& model, OptimizerKind optimizer, std::size_t bytes_per_scalar = 4) {
  return memory_report(model.manifest(), optimizer, bytes_per_scalar);
}

}  // namespace graftmt

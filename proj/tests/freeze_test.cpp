#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "graftmt/freeze.hpp"
#include "graftmt/model.hpp"

namespace graftmt {
namespace {

ModelLayout mbart_layout() { return {ModelConfig::mbart(), AdapterPlacement::kNone, {}, std::nullopt}; }

ParamManifest recipe_manifest(const ModelLayout& base, const std::string& name,
                              const AdapterConfig& adapter = AdapterConfig::paper(AdapterKind::kPlain)) {
  const auto r = make_recipe(name, base.model);
  auto m = layout_manifest(recipe_layout(base, r, adapter));
  apply_policy(m, r.policy);
  return m;
}

TEST(PathPatterns, GlobSemantics) {
  EXPECT_TRUE(path_matches("**", "a/b/c"));
  EXPECT_TRUE(path_matches("a/**", "a/b/c"));
  EXPECT_TRUE(path_matches("a/**/c", "a/c"));
  EXPECT_TRUE(path_matches("*/embed_positions", "encoder/embed_positions"));
  EXPECT_FALSE(path_matches("*/embed_positions", "input_module/x/embed_positions"));
  EXPECT_TRUE(path_matches("**/*_norm/*", "decoder/layer3/cross_attn_norm/bias"));
  EXPECT_FALSE(path_matches("**/*_norm/*", "decoder/layer3/cross_attn/q_proj/bias"));
  EXPECT_FALSE(path_matches("decoder/*/self_attn/**", "decoder/layer0/cross_attn/k_proj/weight"));
  EXPECT_THROW(validate_pattern("a//b"), ConfigError);
  EXPECT_THROW(validate_pattern("a/x**"), ConfigError);
}

TEST(FreezePolicyTest, LastMatchWinsAndEmptyFreezesNothing) {
  FreezePolicy empty;
  EXPECT_TRUE(empty.trainable("anything/at/all"));
  FreezePolicy p;
  p.freeze("**").unfreeze("encoder/**").freeze("encoder/layer0/**");
  EXPECT_FALSE(p.trainable("decoder/layer0/ffn/fc1/weight"));
  EXPECT_TRUE(p.trainable("encoder/layer1/ffn/fc1/weight"));
  EXPECT_FALSE(p.trainable("encoder/layer0/ffn/fc1/weight"));
}

TEST(ApplyPolicy, FrozenTensorsGetNoGradAndIsIdempotent) {
  auto model = build_model<float>(ModelConfig::toy(), 1);
  const auto r = make_recipe("mbart-freeze-decoder", model.config());
  apply_policy(model, r.policy);
  const auto once = model.manifest();
  apply_policy(model, r.policy);
  const auto twice = model.manifest();
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(once[i].trainable, twice[i].trainable);
  auto batch = make_pair_batch({{5, 6, 7}}, {{8, 9}});
  Tape<float> tape(model.tape_options(1));
  tape.backward(model.loss(tape, batch, 0.1));
  for (const auto& [path, t] : model.params()) {
    if (t.requires_grad()) {
      EXPECT_TRUE(t.has_grad()) << path;
    } else {
      EXPECT_FALSE(t.has_grad()) << path;
    }
  }
}

TEST(Recipes, MbartFreezeDecoder) {
  const auto m = recipe_manifest(mbart_layout(), "mbart-freeze-decoder");
  for (const auto& e : m) {
    bool expect;
    if (e.path.starts_with("encoder/") || e.path.starts_with("embed/")) {
      expect = true;
    } else if (e.path == "decoder/embed_positions") {
      expect = true;
    } else {
      expect = path_matches(patterns::kNorms, e.path) || e.path.starts_with("decoder/layer0/self_attn/");
    }
    EXPECT_EQ(e.trainable, expect) << e.path;
  }
}

TEST(Recipes, FtEncAttnExtendsFreezeDecoder) {
  const auto base = recipe_manifest(mbart_layout(), "mbart-freeze-decoder+decoder-adapters");
  const auto ft = recipe_manifest(mbart_layout(), "ft-enc-attn");
  ASSERT_EQ(base.size(), ft.size());
  for (std::size_t i = 0; i < ft.size(); ++i) {
    ASSERT_EQ(base[i].path, ft[i].path);
    if (path_matches("decoder/*/cross_attn/**", ft[i].path)) {
      EXPECT_TRUE(ft[i].trainable) << ft[i].path;
    } else {
      EXPECT_EQ(ft[i].trainable, base[i].trainable) << ft[i].path;
    }
  }
  EXPECT_GT(count_params(ft, patterns::kAdapters, CountMode::kAll, Membership::kTrainable), 0u);
}

TEST(Recipes, CatalogResolvesAndPartitions) {
  ModelLayout grafted{ModelConfig::toy(), AdapterPlacement::kNone, {}, InputModuleConfig::toy(100)};
  for (const auto& name : recipe_names()) {
    const auto m = recipe_manifest(grafted, name, AdapterConfig::toy(AdapterKind::kPlain));
    const auto total = count_params(m, "**");
    EXPECT_EQ(count_params(m, "**", CountMode::kAll, Membership::kTrainable) +
                  count_params(m, "**", CountMode::kAll, Membership::kFrozen),
              total)
        << name;
  }
  EXPECT_THROW(make_recipe("no-such-recipe", ModelConfig::toy()), ConfigError);
  EXPECT_EQ(make_recipe("freeze-decoder", ModelConfig::toy()).name, "mbart-freeze-decoder");
}

TEST(Recipes, GraftRequirement) {
  auto model = build_model<float>(ModelConfig::toy(), 1);
  EXPECT_THROW(apply_recipe(model, make_recipe("bart-frozen", model.config()), AdapterConfig::toy(AdapterKind::kPlain), 1),
               ConfigError);
}

TEST(Recipes, AdapterRecipesInsertAdapters) {
  auto model = build_model<float>(ModelConfig::toy(), 1);
  apply_recipe(model, make_recipe("ft-self-attn", model.config()), AdapterConfig::toy(AdapterKind::kPlain), 1);
  EXPECT_TRUE(model.layout().decoder_adapters());
  EXPECT_FALSE(model.layout().encoder_adapters());
  EXPECT_TRUE(model.params().at("decoder/layer1/adapter/up/weight").requires_grad());
}

TEST(Recipes, EqualSubsetsAtPaperAndToyWidth) {
  for (const auto& cfg : {ModelConfig::mbart(), ModelConfig::toy()}) {
    ModelConfig c = cfg;
    if (c.d_model == 64) c.n_dec_layers = 12;  // three disjoint thirds need at least 3 layers
    const ModelLayout base{c, AdapterPlacement::kNone, {}, std::nullopt};
    std::vector<std::size_t> counts;
    for (const char* name : {"ft-enc-attn", "ft-self-attn", "ft-last3"}) {
      const auto r = make_recipe(name, c);
      auto m = layout_manifest(recipe_layout(base, r, AdapterConfig::paper(AdapterKind::kPlain)));
      apply_policy(m, r.policy);
      counts.push_back(subset_weight_count(m, r));
    }
    EXPECT_EQ(counts[0], 12 * 4 * c.d_model * c.d_model);
    EXPECT_EQ(counts[0], counts[1]);
    EXPECT_EQ(counts[1], counts[2]);
  }
}

TEST(Recipes, JsonRoundTrip) {
  const auto r = make_recipe("ft-last3", ModelConfig::bart());
  const auto path = std::filesystem::temp_directory_path() / "graftmt_recipe_test.json";
  {
    std::ofstream out(path);
    out << json(r).dump(2);
  }
  const auto back = resolve_recipe(path.string(), ModelConfig::bart());
  EXPECT_EQ(back.name, r.name);
  EXPECT_EQ(back.policy.rules, r.policy.rules);
  EXPECT_EQ(back.subset, r.subset);
  EXPECT_EQ(back.adapters, r.adapters);
  std::filesystem::remove(path);
  EXPECT_THROW(resolve_recipe("/nonexistent/recipe.json", ModelConfig::bart()), IoError);
}

TEST(MemoryReportTest, Arithmetic) {
  ParamManifest m{{"a", {750}, false}, {"b", {250}, true}};
  const auto r = memory_report(m, OptimizerKind::kAdam);
  EXPECT_EQ(r.bytes_params_total, 4000u);
  EXPECT_EQ(r.bytes_grads, 1000u);
  EXPECT_EQ(r.bytes_optimizer_state, 2000u);
  EXPECT_EQ(r.bytes_total, 7000u);
  EXPECT_DOUBLE_EQ(r.trainable_fraction, 0.25);
}

TEST(MemoryReportTest, SgdWithOnlyNormsTrainable) {
  auto m = layout_manifest({ModelConfig::toy(), AdapterPlacement::kNone, {}, std::nullopt});
  FreezePolicy p;
  p.freeze("**").unfreeze(patterns::kNorms);
  apply_policy(m, p);
  const auto r = memory_report(m, OptimizerKind::kSgd);
  EXPECT_EQ(r.bytes_optimizer_state, 0u);
  EXPECT_EQ(r.bytes_grads, 4 * count_params(m, patterns::kNorms));
  EXPECT_EQ(count_params(m, patterns::kNorms), body_norm_modules(ModelConfig::toy()) * 2 * 64);
}

TEST(MemoryReportTest, TableFiveOrderingOnMbart) {
  std::vector<std::size_t> bytes;
  for (const char* name : {"finetune-all", "ft-enc-attn", "mbart-freeze-encoder", "mbart-freeze-decoder+decoder-adapters"})
    bytes.push_back(memory_report(recipe_manifest(mbart_layout(), name), OptimizerKind::kAdam).bytes_total);
  EXPECT_GT(bytes[0], bytes[1]);
  EXPECT_GT(bytes[1], bytes[2]);
  EXPECT_GT(bytes[2], bytes[3]);
}

TEST(MemoryReportTest, FreezingMoreNeverIncreasesMemory) {
  auto m = layout_manifest({ModelConfig::toy(), AdapterPlacement::kNone, {}, std::nullopt});
  FreezePolicy p;
  std::size_t prev = memory_report(m, OptimizerKind::kAdam).bytes_total;
  for (const char* pat : {"decoder/layer1/**", "decoder/**", "encoder/layer0/ffn/**", "embed/**", "**"}) {
    p.freeze(pat);
    apply_policy(m, p);
    const auto now = memory_report(m, OptimizerKind::kAdam).bytes_total;
    EXPECT_LE(now, prev) << pat;
    prev = now;
  }
  EXPECT_EQ(prev, memory_report(m, OptimizerKind::kAdam).bytes_params_total);
}

TEST(MemoryReportTest, AdamMomentsOnlyForTrainable) {
  auto model = build_model<float>(ModelConfig::toy(), 1);
  apply_policy(model, make_recipe("mbart-freeze-encoder", model.config()).policy);
  const auto r = memory_report(model, OptimizerKind::kAdam);
  EXPECT_EQ(r.bytes_optimizer_state, 2 * 4 * r.trainable_params);
}

}  // namespace
}  // namespace graftmt

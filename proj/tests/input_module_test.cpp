#include <gtest/gtest.h>

#include <cmath>

#include "graftmt/freeze.hpp"
#include "graftmt/model.hpp"
#include "test_support.hpp"

namespace graftmt {
namespace {

TEST(Sinusoidal, PositionZero) {
  for (std::size_t d : {4u, 8u, 32u})
    for (std::size_t i = 0; i < d; ++i) EXPECT_EQ(sinusoidal(0, i, d), i < d / 2 ? 0.0 : 1.0);
}

TEST(Sinusoidal, HandValues) {
  EXPECT_NEAR(sinusoidal(1, 0, 4), 0.841471, 1e-6);
  EXPECT_NEAR(sinusoidal(1, 3, 4), 1.0, 1e-8);
  EXPECT_DOUBLE_EQ(sinusoidal(1, 3, 4), std::cos(1.0 / 1e8));
  // First cos entry uses exponent 1 / (d_s/2 - 1).
  EXPECT_DOUBLE_EQ(sinusoidal(3, 4, 8), std::cos(3.0 / std::pow(10000.0, 1.0 / 3.0)));
}

TEST(Sinusoidal, Errors) {
  EXPECT_THROW(sinusoidal(0, 0, 7), ConfigError);
  EXPECT_THROW(sinusoidal(0, 0, 2), ConfigError);
}

TEST(Sinusoidal, BoundedAndExtensible) {
  const auto small = sinusoidal_table<double>(50, 16);
  const auto big = sinusoidal_table<double>(200, 16);
  for (std::size_t i = 0; i < small.size(); ++i) EXPECT_EQ(small[i], big[i]);
  for (double v : big) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Sinusoidal, InterleavedScheme) {
  EXPECT_DOUBLE_EQ(sinusoidal(2, 0, 8, SinusoidScheme::kInterleaved), std::sin(2.0));
  EXPECT_DOUBLE_EQ(sinusoidal(2, 1, 8, SinusoidScheme::kInterleaved), std::cos(2.0));
  EXPECT_DOUBLE_EQ(sinusoidal(2, 3, 8, SinusoidScheme::kInterleaved), std::cos(2.0 / std::pow(10000.0, 2.0 / 8.0)));
}

TEST(InputModuleConfigTest, Alpha) {
  EXPECT_DOUBLE_EQ(InputModuleConfig::paper().resolved_alpha(1024), 32.0);
  EXPECT_DOUBLE_EQ(InputModuleConfig::toy(100).resolved_alpha(64), 8.0);
  EXPECT_EQ(InputModuleConfig::paper().heads(), 32u);
  EXPECT_EQ(InputModuleConfig::toy(100).heads(), 2u);
}

Seq2SeqModel<double> grafted_toy(std::uint64_t seed, InputModuleConfig im = InputModuleConfig::toy(50)) {
  auto c = ModelConfig::toy();
  c.vocab_size = 40;
  auto model = Seq2SeqModel<double>::build(c, seed);
  model.graft(im, seed + 1);
  model.eval();
  return model;
}

TEST(InputModuleForward, OutputNormScale) {
  auto model = grafted_toy(1);
  Rng rng(7);
  std::vector<std::vector<int>> src;
  for (int b = 0; b < 8; ++b) {
    std::vector<int> s;
    for (int t = 0; t < 9; ++t) s.push_back(static_cast<int>(rng.uniform_int(5, 49)));
    src.push_back(s);
  }
  auto batch = collate(src, Special::kPad);
  Tape<double> tape(model.tape_options());
  auto out = model.input_module().forward(tape, batch);
  ASSERT_EQ(out.dim(1), 64u);
  for (std::size_t r = 0; r < out.dim(0); ++r) {
    double sq = 0;
    for (std::size_t j = 0; j < 64; ++j) sq += out[r * 64 + j] * out[r * 64 + j];
    EXPECT_GE(std::sqrt(sq), 0.5 * 8 * 8);
    EXPECT_LE(std::sqrt(sq), 1.5 * 8 * 8);
  }
}

TEST(InputModuleForward, DoublingAlphaDoublesOutput) {
  auto model = grafted_toy(2);
  auto batch = collate({{5, 6, 7}}, Special::kPad);
  Tape<double> tape(model.tape_options());
  const auto a = model.input_module().forward(tape, batch);
  model.input_module().set_alpha(16.0);
  const auto b = model.input_module().forward(tape, batch);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_DOUBLE_EQ(b[i], 2.0 * a[i]);
}

TEST(InputModuleForward, MatchedScaleFollowsBodyEmbeddings) {
  auto im = InputModuleConfig::toy(50);
  im.match_body_scale = true;
  auto model = grafted_toy(6, im);
  // Brute-force RMS over every coordinate of the scaled embedding table.
  const auto& e = model.params().at("embed/tokens");
  double sq = 0;
  for (double v : e.data()) sq += 64.0 * v * v;
  const double rms = std::sqrt(sq / static_cast<double>(e.numel()));
  EXPECT_NEAR(model.input_module().alpha(), rms, 1e-9);
  ASSERT_TRUE(model.layout().input_module.has_value());
  EXPECT_NEAR(model.layout().input_module->alpha, rms, 1e-9);
  EXPECT_FALSE(model.layout().input_module->match_body_scale);

  auto batch = collate({{5, 6, 7, 8}}, Special::kPad);
  Tape<double> tape(model.tape_options());
  const auto out = model.input_module().forward(tape, batch);
  for (std::size_t r = 0; r < out.dim(0); ++r) {
    double row = 0;
    for (std::size_t j = 0; j < 64; ++j) row += out[r * 64 + j] * out[r * 64 + j];
    EXPECT_NEAR(std::sqrt(row / 64.0), rms, 1e-3 * rms);  // LN rows have unit RMS
  }
}

TEST(InputModuleForward, PermutationEquivariantWithoutPositions) {
  auto im = InputModuleConfig::toy(50);
  im.add_fixed_per_layer = false;
  auto model = grafted_toy(3, im);
  auto& pos = model.params().at("input_module/embed_positions");
  std::fill(pos.data().begin(), pos.data().end(), 0.0);
  const std::vector<int> tokens{5, 9, 13, 21, 30};
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<int> permuted;
  for (auto p : perm) permuted.push_back(tokens[p]);
  Tape<double> tape(model.tape_options());
  const auto a = model.input_module().forward(tape, collate({tokens}, Special::kPad));
  const auto b = model.input_module().forward(tape, collate({permuted}, Special::kPad));
  for (std::size_t r = 0; r < perm.size(); ++r)
    for (std::size_t j = 0; j < 64; ++j) EXPECT_NEAR(b[r * 64 + j], a[perm[r] * 64 + j], 1e-9);
}

TEST(InputModuleForward, PositionsMatterWithSinusoids) {
  auto model = grafted_toy(3);
  Tape<double> tape(model.tape_options());
  const auto a = model.input_module().forward(tape, collate({{5, 9}}, Special::kPad));
  const auto b = model.input_module().forward(tape, collate({{9, 5}}, Special::kPad));
  double diff = 0;
  for (std::size_t j = 0; j < 64; ++j) diff += std::abs(a[j] - b[64 + j]);
  EXPECT_GT(diff, 1e-6);
}

TEST(InputModuleForward, PositionBeyondTable) {
  auto im = InputModuleConfig::toy(50);
  im.max_positions = 4;
  auto model = grafted_toy(4, im);
  Tape<double> tape(model.tape_options());
  EXPECT_THROW(model.input_module().forward(tape, collate({{5, 6, 7, 8, 9}}, Special::kPad)), RangeError);
}

TEST(InputModuleForward, DegenerateFormRecoversPlainEmbeddingEncoder) {
  auto im = InputModuleConfig::toy(50, 64);
  im.d_s = 64;
  im.alpha = 1.0;
  im.use_output_norm = false;
  im.use_projection = false;
  auto model = grafted_toy(5, im);
  EXPECT_FALSE(model.params().contains("input_module/proj/weight"));
  EXPECT_FALSE(model.params().contains("input_module/out_norm/weight"));
  Tape<double> tape(model.tape_options());
  auto out = model.input_module().forward(tape, collate({{5, 6, 7}}, Special::kPad));
  EXPECT_EQ(out.dim(1), 64u);
}

TEST(Graft, WidthMismatchWithoutProjection) {
  auto im = InputModuleConfig::toy(50);
  im.use_projection = false;  // d_s 32 vs body 64
  auto model = Seq2SeqModel<float>::build(ModelConfig::toy(), 1);
  EXPECT_THROW(model.graft(im, 1), DimensionError);
}

TEST(Graft, SubstitutingBodyEmbeddingsRecoversUngraftedLogits) {
  auto c = ModelConfig::toy();
  c.vocab_size = 40;
  auto body = Seq2SeqModel<double>::build(c, 8);
  body.eval();
  auto grafted = body.clone();
  grafted.graft(InputModuleConfig::toy(50), 9);
  auto batch = make_pair_batch({{5, 6, 7, 8}}, {{10, 11, 12}});
  Tape<double> t1(body.tape_options());
  const auto ref = body.logits(t1, batch);
  Tape<double> t2(grafted.tape_options());
  auto mem = grafted.encode_embedded(t2, grafted.embed_body_tokens(t2, batch.src), batch.src);
  const auto out = grafted.decode(t2, mem, batch.src, batch.tgt_in);
  for (std::size_t i = 0; i < ref.numel(); ++i) ASSERT_EQ(out[i], ref[i]);
}

TEST(Graft, BartFrozenTrainableSet) {
  auto model = Seq2SeqModel<float>::build(ModelConfig::toy(), 1);
  model.graft(InputModuleConfig::toy(50), 2);
  const auto recipe = make_recipe("bart-frozen", model.config());
  apply_recipe(model, recipe, AdapterConfig::toy(AdapterKind::kPlain), 3);
  for (const auto& e : model.manifest()) {
    const bool expect = e.path.starts_with("input_module/") || path_matches(patterns::kNorms, e.path) ||
                        e.path.starts_with("encoder/layer0/self_attn/");
    EXPECT_EQ(e.trainable, expect) << e.path;
  }
  EXPECT_FALSE(model.params().at("embed/tokens").requires_grad());
}

TEST(Graft, AddsInputModulePrefix) {
  auto model = Seq2SeqModel<float>::build(ModelConfig::toy(), 1);
  const auto before = model.params().size();
  model.graft(InputModuleConfig::toy(50), 2);
  EXPECT_GT(model.params().size(), before);
  EXPECT_TRUE(model.params().contains("input_module/embed_tokens"));
  EXPECT_TRUE(model.params().contains("input_module/out_norm/weight"));
  EXPECT_EQ(model.source_vocab_size(), 50u);
  EXPECT_THROW(model.graft(InputModuleConfig::toy(50), 2), StateError);
}

}  // namespace
}  // namespace graftmt

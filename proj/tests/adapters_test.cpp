#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "graftmt/freeze.hpp"
#include "graftmt/model.hpp"
#include "test_support.hpp"

namespace graftmt {
namespace {

AdapterParams<double> make_params(ParamTree<double>& tree, std::size_t d, std::size_t hidden, bool glu, Rng& rng) {
  tree.add("a/down/weight", testing::random_tensor({d, hidden}, rng, 0.5));
  tree.add("a/up/weight", testing::random_tensor({hidden, d}, rng, 0.5));
  if (glu) tree.add("a/gate/weight", testing::random_tensor({d, hidden}, rng, 0.5));
  return AdapterParams<double>::bind(tree, "a");
}

TEST(AdapterForward, ZeroUpProjectionIsIdentity) {
  for (auto kind : {AdapterKind::kPlain, AdapterKind::kGlu}) {
    Rng rng(1);
    ParamTree<double> tree;
    auto p = make_params(tree, 6, 3, kind == AdapterKind::kGlu, rng);
    std::fill(p.up.data().begin(), p.up.data().end(), 0.0);
    auto h = testing::random_tensor({4, 6}, rng, 2.0, false);
    Tape<double> tape;
    auto out = adapter_forward(tape, p, {kind, 3, 0.0}, h);
    for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_EQ(out[i], h[i]);
  }
}

TEST(AdapterForward, ScalarHandCase) {
  ParamTree<double> tree;
  tree.add("a/down/weight", Tensor<double>({1, 1}, std::vector<double>{1.0}));
  tree.add("a/up/weight", Tensor<double>({1, 1}, std::vector<double>{1.0}));
  auto p = AdapterParams<double>::bind(tree, "a");
  Tape<double> tape;
  auto out = adapter_forward(tape, p, {AdapterKind::kPlain, 1, 0.0}, Tensor<double>({1, 1}, std::vector<double>{1.0}));
  const double z = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
  EXPECT_NEAR(z, 0.841345, 1e-6);
  EXPECT_NEAR(out.item(), std::tanh(z) + 1.0, 1e-12);
  EXPECT_NEAR(out.item(), 1.6865207, 1e-7);
  EXPECT_NEAR(out.item(), 1.686, 1e-3);
}

TEST(AdapterForward, GluWithZeroGateMatchesPlain) {
  Rng rng(2);
  ParamTree<double> tree;
  auto p = make_params(tree, 5, 4, true, rng);
  std::fill(p.gate.data().begin(), p.gate.data().end(), 0.0);
  auto h = testing::random_tensor({3, 5}, rng, 1.0, false);
  Tape<double> tape;
  auto glu = adapter_forward(tape, p, {AdapterKind::kGlu, 4, 0.0}, h);
  auto plain = adapter_forward(tape, p, {AdapterKind::kPlain, 4, 0.0}, h);
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_DOUBLE_EQ(glu[i], plain[i]);
}

TEST(AdapterForward, DeviationBoundedByOne) {
  Rng rng(3);
  ParamTree<double> tree;
  auto p = make_params(tree, 8, 4, true, rng);
  for (auto& v : p.up.data()) v *= 50.0;
  auto h = testing::random_tensor({10, 8}, rng, 3.0, false);
  Tape<double> tape;
  auto out = adapter_forward(tape, p, {AdapterKind::kGlu, 4, 0.0}, h);
  // tanh saturates to exactly 1 here; allow the rounding of the residual add.
  for (std::size_t i = 0; i < h.numel(); ++i)
    EXPECT_LE(std::abs(out[i] - h[i]), 1.0 + 4 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(h[i])));
}

TEST(AdapterForward, GateFactorRange) {
  Tape<double> tape;
  Tensor<double> x({5}, std::vector<double>{-40.0, -1.0, 0.0, 1.0, 40.0});
  auto g = scale(tape, sigmoid(tape, x), 2.0);
  EXPECT_DOUBLE_EQ(g[2], 1.0);
  for (std::size_t i = 1; i < 4; ++i) {
    EXPECT_GT(g[i], 0.0);
    EXPECT_LT(g[i], 2.0);
  }
}

TEST(AdapterForward, DimensionMismatch) {
  Rng rng(4);
  ParamTree<double> tree;
  auto p = make_params(tree, 6, 3, false, rng);
  Tape<double> tape;
  EXPECT_THROW(adapter_forward(tape, p, {AdapterKind::kPlain, 3, 0.0}, Tensor<double>({2, 5})), DimensionError);
}

TEST(AdapterForward, GradientsReachAllProjections) {
  Rng rng(5);
  ParamTree<double> tree;
  auto p = make_params(tree, 6, 3, true, rng);
  auto h = testing::random_tensor({4, 6}, rng);
  const AdapterConfig cfg{AdapterKind::kGlu, 3, 0.0};
  auto loss_fn = [&] {
    Tape<double> t;
    t.set_recording(false);
    auto o = adapter_forward(t, p, cfg, h);
    return sum(t, mul(t, o, o)).item();
  };
  Tape<double> tape;
  auto o = adapter_forward(tape, p, cfg, h);
  tape.backward(sum(tape, mul(tape, o, o)));
  auto r = testing::finite_difference_check(loss_fn, {{"down", p.down}, {"up", p.up}, {"gate", p.gate}, {"h", h}}, 8, 3);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(InsertAdapters, LogitsUnchangedAfterInsertion) {
  for (auto kind : {AdapterKind::kPlain, AdapterKind::kGlu}) {
    auto model = build_model<float>(ModelConfig::toy(), 3);
    model.eval();
    auto batch = make_pair_batch({{5, 6, 7, 8}, {9, 10}}, {{11, 12, 13}, {14}});
    Tape<float> t1(model.tape_options());
    const auto before = model.logits(t1, batch).clone();
    model.insert_adapters(AdapterPlacement::kBoth, AdapterConfig::toy(kind), 5);
    Tape<float> t2(model.tape_options());
    const auto after = model.logits(t2, batch);
    ASSERT_EQ(before.numel(), after.numel());
    for (std::size_t i = 0; i < before.numel(); ++i) ASSERT_EQ(before[i], after[i]);
  }
}

TEST(InsertAdapters, DoubleInsertionIsStateError) {
  auto model = build_model<float>(ModelConfig::toy(), 3);
  model.insert_adapters(AdapterPlacement::kDecoder, AdapterConfig::toy(AdapterKind::kPlain), 1);
  EXPECT_THROW(model.insert_adapters(AdapterPlacement::kDecoder, AdapterConfig::toy(AdapterKind::kPlain), 1),
               StateError);
  EXPECT_THROW(model.insert_adapters(AdapterPlacement::kBoth, AdapterConfig::toy(AdapterKind::kPlain), 1), StateError);
  model.insert_adapters(AdapterPlacement::kEncoder, AdapterConfig::toy(AdapterKind::kPlain), 1);
  EXPECT_EQ(model.layout().adapters, AdapterPlacement::kBoth);
}

TEST(InsertAdapters, ToyWeightCounts) {
  auto model = build_model<float>(ModelConfig::toy(), 3);
  const auto base = count_params(model, "**", CountMode::kBiasFree);
  model.insert_adapters(AdapterPlacement::kDecoder, AdapterConfig::toy(AdapterKind::kPlain), 1);
  EXPECT_EQ(count_params(model, "**", CountMode::kBiasFree) - base, 2u * (64 * 16 + 16 * 64));
  EXPECT_EQ(count_params(model, patterns::kAdapters), 4096u);

  auto glu = build_model<float>(ModelConfig::toy(), 3);
  glu.insert_adapters(AdapterPlacement::kDecoder, AdapterConfig::toy(AdapterKind::kGlu), 1);
  EXPECT_EQ(AdapterConfig::toy(AdapterKind::kGlu).d_hidden, 11u);
  EXPECT_EQ(count_params(glu, patterns::kAdapters), 2u * (3 * 64 * 11));
  EXPECT_EQ(count_params(glu, patterns::kAdapters), 4224u);
}

TEST(AdapterConfigTest, PaperWidths) {
  EXPECT_EQ(AdapterConfig::paper(AdapterKind::kPlain).d_hidden, 128u);
  EXPECT_EQ(AdapterConfig::paper(AdapterKind::kGlu).d_hidden, 85u);
  EXPECT_THROW((AdapterConfig{AdapterKind::kPlain, 0, 0.1}).validate(), ConfigError);
  EXPECT_THROW((AdapterConfig{AdapterKind::kPlain, 4, 1.0}).validate(), ConfigError);
}

TEST(InsertAdapters, PathsLiveUnderAdapter) {
  auto model = build_model<float>(ModelConfig::toy(), 3);
  model.insert_adapters(AdapterPlacement::kEncoder, AdapterConfig::toy(AdapterKind::kGlu), 1);
  EXPECT_TRUE(model.params().contains("encoder/layer1/adapter/gate/weight"));
  EXPECT_TRUE(model.params().contains("encoder/layer0/adapter/up/weight"));
  EXPECT_FALSE(model.params().contains("decoder/layer0/adapter/up/weight"));
}

}  // namespace
}  // namespace graftmt

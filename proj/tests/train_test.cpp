#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "graftmt/train.hpp"

namespace graftmt {
namespace {

namespace fs = std::filesystem;

ModelConfig small_config(std::size_t vocab) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_enc_layers = c.n_dec_layers = 1;
  c.vocab_size = vocab;
  c.max_positions = 40;
  return c;
}

struct Corpus {
  Vocab src, tgt;
  ParallelSplits splits;
};

Corpus make_corpus(const SyntheticLangSpec& spec, std::size_t n_train, std::size_t n_eval) {
  auto train = gen_parallel(spec, n_train), valid = gen_parallel(spec, n_eval, Split::kValid),
       test = gen_parallel(spec, n_eval, Split::kTest);
  std::vector<std::string> src_lines, tgt_lines;
  for (const auto& p : train) {
    src_lines.push_back(p.src);
    tgt_lines.push_back(p.tgt);
  }
  Corpus c{Vocab::build(src_lines), Vocab::build(tgt_lines), {}};
  c.splits = {encode_pairs(train, c.src, c.tgt), encode_pairs(valid, c.src, c.tgt), encode_pairs(test, c.src, c.tgt)};
  return c;
}

SyntheticLangSpec cipher_spec(std::uint64_t seed, std::size_t vocab = 20) {
  SyntheticLangSpec s;
  s.vocab_size = vocab;
  s.cipher_seed = seed + 11;
  s.script = "q";
  s.seed = seed;
  s.max_len = 6;
  return s;
}

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("graftmt_train_test_" + name);
  fs::remove_all(dir);
  return dir;
}

template <typename T>
bool same_values(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

TEST(EncodeSource, EndsWithEos) {
  Vocab v = Vocab::build({"a b"});
  const auto ids = encode_source(v, "b a");
  ASSERT_EQ(ids.size(), 3u);
  EXPECT_EQ(ids.back(), Special::kEos);
  EXPECT_EQ(ids[0], v.id("b"));
}

TEST(BatchStreamTest, RewindsAndReshufflesPerEpoch) {
  std::vector<EncodedPair> items;
  for (int i = 0; i < 12; ++i) items.push_back({{5 + i, 2}, {5 + i}});
  auto s = BatchStream::fixed(items, 6, 3);  // 3 items per batch
  ASSERT_EQ(s.batches_per_epoch(), 4u);
  std::vector<int> first, second;
  auto take = [&s](std::vector<int>& into) {
    const auto batch = s.next();
    for (std::size_t r = 0; r < 3; ++r) into.push_back(batch.tgt_out[r * 2]);
  };
  for (int b = 0; b < 4; ++b) take(first);
  EXPECT_EQ(s.epoch(), 0u);
  for (int b = 0; b < 4; ++b) take(second);
  EXPECT_EQ(s.epoch(), 1u);
  EXPECT_EQ(s.served(), 8u);
  auto a = first, b = second;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);  // every item once per epoch
  EXPECT_NE(first, second);

  auto t = BatchStream::fixed(items, 6, 3);
  t.restore(1, 2, 6);
  auto u = BatchStream::fixed(items, 6, 3);
  for (int i = 0; i < 6; ++i) u.next();
  EXPECT_EQ(t.next().tgt_out, u.next().tgt_out);
  EXPECT_THROW(t.restore(0, 9, 0), StateError);
  EXPECT_THROW(BatchStream::fixed({}, 6, 0), ContractError);
}

TEST(TrainPlanTest, ValidationAndJson) {
  TrainPlan p;
  p.max_steps = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = TrainPlan{};
  p.label_smoothing = 1.5;
  EXPECT_THROW(p.validate(), ConfigError);
  p = TrainPlan{};
  p.recipe = "bart-frozen";
  p.selection = Selection::kFixedStep;
  EXPECT_EQ(json(p).get<TrainPlan>().recipe, "bart-frozen");
  EXPECT_EQ(json(p)["selection"], "fixed-step");
}

TEST(RoundRobinTest, AccountingIdentity) {
  std::map<std::string, ParallelSplits> pairs;
  std::vector<std::string> tgt_lines;
  // Shared target vocabulary; pair "b" has ten times more data than the others.
  const std::map<std::string, std::size_t> sizes{{"a", 20}, {"b", 200}, {"c", 20}};
  std::map<std::string, std::vector<TextPair>> text;
  std::uint64_t k = 0;
  for (const auto& [name, n] : sizes) {
    auto spec = cipher_spec(k++);
    text[name] = gen_parallel(spec, n);
    for (const auto& p : text[name]) tgt_lines.push_back(p.tgt);
  }
  Vocab joint = Vocab::build(tgt_lines);
  for (const auto& [name, t] : text) {
    std::vector<std::string> src;
    for (const auto& p : t) src.push_back(p.src);
    for (const auto& w : split_words(join_words(src))) joint.add(w);
  }
  for (const auto& [name, t] : text) {
    auto enc = encode_pairs(t, joint, joint);
    std::vector<EncodedPair> valid(enc.begin(), enc.begin() + 5);
    pairs[name] = {enc, valid, valid};
  }
  auto model = build_model<float>(small_config(joint.size()), 1);
  TrainPlan plan;
  plan.max_steps = 10;
  plan.eval_interval = 5;
  plan.batch_tokens = 24;
  plan.selection = Selection::kFixedStep;
  const auto r = round_robin(model.clone(), pairs, plan, AdapterConfig::toy(AdapterKind::kPlain), {}, false);
  EXPECT_EQ(r.train.forward_backward_passes, 30u);
  EXPECT_EQ(r.train.updates, 10u);
  EXPECT_EQ(r.train.updates * pairs.size(), r.train.forward_backward_passes);
  // Pairs "a" and "c" have fewer than 10 batches per epoch and wrap around.
  for (const auto& [name, served] : r.train.batches_served) EXPECT_EQ(served, 10u) << name;
  ASSERT_EQ(r.train.pair_valid_curves.size(), 3u);
  for (const auto& [name, curve] : r.train.pair_valid_curves) EXPECT_EQ(curve.size(), 3u) << name;  // steps 0, 5, 10

  std::map<std::string, ParallelSplits> one{{"a", pairs.at("a")}};
  EXPECT_THROW(round_robin(model.clone(), one, plan), ContractError);
}

TEST(RoundRobinTest, FrozenParametersBitEqual) {
  std::map<std::string, ParallelSplits> pairs;
  std::vector<std::string> lines;
  for (const auto& p : gen_parallel(cipher_spec(1), 40)) lines.push_back(p.src + " " + p.tgt);
  for (const auto& p : gen_parallel(cipher_spec(2), 40)) lines.push_back(p.src + " " + p.tgt);
  Vocab joint = Vocab::build(lines);
  for (std::uint64_t k : {1, 2}) {
    auto tr = gen_parallel(cipher_spec(k), 40), va = gen_parallel(cipher_spec(k), 5, Split::kValid);
    pairs["p" + std::to_string(k)] = {encode_pairs(tr, joint, joint), encode_pairs(va, joint, joint),
                                      encode_pairs(va, joint, joint)};
  }
  auto body = build_model<float>(small_config(joint.size()), 4);
  TrainPlan plan;
  plan.recipe = "freeze-decoder";
  plan.max_steps = 20;
  plan.eval_interval = 10;
  plan.batch_tokens = 32;
  plan.beam = 1;
  const auto r = round_robin(body.clone(), pairs, plan);
  std::size_t frozen = 0, moved = 0;
  for (const auto& [path, t] : r.train.model.params()) {
    if (!body.params().contains(path)) continue;
    if (!t.requires_grad()) {
      ++frozen;
      EXPECT_TRUE(same_values(t, body.params().at(path))) << path;
    } else if (!same_values(t, body.params().at(path))) {
      ++moved;
    }
  }
  EXPECT_GT(frozen, 0u);
  EXPECT_GT(moved, 0u);
  EXPECT_EQ(r.per_pair.size(), 2u);
}

TEST(FinetuneTest, FrozenRecipeNeedsGraft) {
  auto c = make_corpus(cipher_spec(3), 20, 4);
  auto body = build_model<float>(small_config(c.tgt.size()), 1);
  TrainPlan plan;
  plan.recipe = "bart-frozen";
  plan.max_steps = 1;
  EXPECT_THROW(finetune_bilingual(body.clone(), c.splits, plan, std::nullopt, AdapterConfig::toy(AdapterKind::kPlain)),
               ConfigError);
  EXPECT_THROW(finetune_bilingual(body.clone(), ParallelSplits{}, plan, std::nullopt, AdapterConfig::toy(AdapterKind::kPlain)),
               ContractError);
}

TEST(FinetuneTest, FrozenBodyBitEqualAndSelectionIsArgmin) {
  auto c = make_corpus(cipher_spec(5), 60, 8);
  auto body = build_model<float>(small_config(c.tgt.size()), 2);
  auto im = InputModuleConfig::toy(c.src.size(), 16);
  im.d_s = 8;
  im.max_positions = 40;
  TrainPlan plan;
  plan.recipe = "bart-frozen";
  plan.max_steps = 30;
  plan.eval_interval = 5;
  plan.batch_tokens = 40;
  plan.schedule = {5, 3e-3};
  plan.beam = 2;
  const auto r = finetune_bilingual(body.clone(), c.splits, plan, im, AdapterConfig::toy(AdapterKind::kPlain));
  ASSERT_TRUE(r.train.model.grafted());
  for (const auto& [path, t] : r.train.model.params()) {
    if (t.requires_grad()) continue;
    ASSERT_TRUE(body.params().contains(path)) << path;
    EXPECT_TRUE(same_values(t, body.params().at(path))) << path;
  }
  EXPECT_FALSE(r.train.model.params().at("embed/tokens").requires_grad());

  const auto& curve = r.train.valid_curve;
  ASSERT_EQ(curve.size(), 7u);
  const auto best = std::min_element(curve.begin(), curve.end(),
                                     [](const auto& a, const auto& b) { return a.second < b.second; });
  EXPECT_EQ(r.train.selected_step, best->first);
  EXPECT_EQ(r.train.selected_valid_nll, best->second);
  // The returned model is the selected one: its validation NLL is the recorded minimum.
  auto selected = r.train.model.clone();
  EXPECT_NEAR(mean_nll(selected, c.splits.valid, plan.batch_tokens), best->second, 1e-9);
  EXPECT_GE(r.test.bleu, 0.0);
  EXPECT_LE(r.test.bleu, 100.0);
  EXPECT_EQ(r.test.hypotheses.size(), c.splits.test.size());
}

TEST(FinetuneTest, FixedStepSelectionKeepsLastModel) {
  auto c = make_corpus(cipher_spec(6), 30, 4);
  auto body = build_model<float>(small_config(c.tgt.size()), 3);
  TrainPlan plan;
  plan.max_steps = 12;
  plan.eval_interval = 5;
  plan.batch_tokens = 32;
  plan.selection = Selection::kFixedStep;
  plan.beam = 1;
  const auto r = finetune_bilingual(body.clone(), c.splits, plan, std::nullopt, AdapterConfig::toy(AdapterKind::kPlain));
  EXPECT_EQ(r.train.selected_step, 12u);
  ASSERT_EQ(r.train.valid_curve.size(), 4u);  // 0, 5, 10, 12
  EXPECT_EQ(r.train.valid_curve.back().first, 12u);
}

TEST(FinetuneTest, BitReproducible) {
  auto c = make_corpus(cipher_spec(7), 40, 5);
  auto run = [&] {
    auto body = build_model<float>(small_config(c.tgt.size()), 9);
    TrainPlan plan;
    plan.max_steps = 15;
    plan.eval_interval = 5;
    plan.batch_tokens = 32;
    plan.seed = 4;
    plan.beam = 3;
    return finetune_bilingual(body.clone(), c.splits, plan, std::nullopt, AdapterConfig::toy(AdapterKind::kPlain));
  };
  const auto a = run();
  const auto b = run();
  for (const auto& [path, t] : a.train.model.params()) EXPECT_TRUE(same_values(t, b.train.model.params().at(path))) << path;
  EXPECT_EQ(a.train.valid_curve, b.train.valid_curve);
  EXPECT_EQ(a.test.hypotheses, b.test.hypotheses);
  EXPECT_EQ(a.test.bleu, b.test.bleu);
}

TEST(FinetuneTest, CopyPairReachesBleu99Within500Steps) {
  SyntheticLangSpec spec;
  spec.cipher = false;
  auto c = make_corpus(spec, 2000, 100);
  auto cfg = ModelConfig::toy();
  cfg.vocab_size = c.tgt.size();
  cfg.max_positions = 64;
  // The copy task maps words to themselves, so source and target share one vocabulary.
  ASSERT_EQ(c.src, c.tgt);
  auto model = build_model<float>(cfg, 1);
  TrainPlan plan;
  plan.max_steps = 500;
  plan.batch_tokens = 128;
  plan.schedule = {100, 3e-3};
  const auto r = finetune_bilingual(model.clone(), c.splits, plan, std::nullopt, AdapterConfig::toy(AdapterKind::kPlain));
  EXPECT_GE(r.test.bleu, 99.0);
  EXPECT_EQ(r.test.truncated, 0u);
}

std::vector<std::vector<int>> mono_ids(const SyntheticLangSpec& spec, std::size_t n, Split split, const Vocab& v) {
  std::vector<std::vector<int>> out;
  for (const auto& line : gen_monolingual(spec, n, split)) out.push_back(v.encode(line));
  return out;
}

TEST(PretrainTest, NoiseOffBecomesCopyAndNllApproachesZero) {
  SyntheticLangSpec spec;
  spec.cipher = false;
  spec.vocab_size = 20;
  spec.max_len = 6;
  const auto lines = gen_monolingual(spec, 400);
  const Vocab v = Vocab::build(lines);
  auto model = build_model<float>(small_config(v.size()), 2);
  TrainPlan plan;
  plan.max_steps = 400;
  plan.eval_interval = 100;
  plan.batch_tokens = 64;
  plan.schedule = {50, 1e-2};
  plan.label_smoothing = 0.0;
  PretrainOptions opts{NoiseSpec::off(), 1};
  const auto r = pretrain_denoise(model, mono_ids(spec, 400, Split::kTrain, v), mono_ids(spec, 50, Split::kValid, v),
                                  opts, plan);
  const double initial = r.valid_curve.front().second;
  EXPECT_LT(r.selected_valid_nll, 0.05 * initial);
  EXPECT_LT(r.selected_valid_nll, 0.15);
}

TEST(PretrainTest, DivergenceAborts) {
  SyntheticLangSpec spec;
  spec.vocab_size = 20;
  spec.max_len = 6;
  spec.cipher = false;
  const auto lines = gen_monolingual(spec, 100);
  const Vocab v = Vocab::build(lines);
  auto model = build_model<float>(small_config(v.size()), 2);
  TrainPlan plan;
  plan.max_steps = 60;
  plan.eval_interval = 2;
  plan.batch_tokens = 64;
  plan.schedule = {0, 50.0};
  plan.max_grad_norm = 0.0;
  try {
    pretrain_denoise(model, mono_ids(spec, 100, Split::kTrain, v), mono_ids(spec, 20, Split::kValid, v),
                     PretrainOptions{}, plan);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("3 consecutive"), std::string::npos);
  }
}

TEST(PretrainTest, ResumeMatchesUninterruptedRun) {
  SyntheticLangSpec spec;
  spec.vocab_size = 20;
  spec.max_len = 6;
  spec.cipher = false;
  const auto lines = gen_monolingual(spec, 200);
  const Vocab v = Vocab::build(lines);
  const auto train = mono_ids(spec, 200, Split::kTrain, v), valid = mono_ids(spec, 20, Split::kValid, v);
  TrainPlan plan;
  plan.max_steps = 40;
  plan.eval_interval = 10;
  plan.batch_tokens = 48;
  plan.schedule = {10, 3e-3};

  const auto full_dir = scratch_dir("full"), part_dir = scratch_dir("part");
  auto m1 = build_model<float>(small_config(v.size()), 6);
  const auto full = pretrain_denoise(m1, train, valid, PretrainOptions{}, plan,
                                     {full_dir.string(), (full_dir / "metrics.jsonl").string(), false});

  auto half = plan;
  half.max_steps = 20;
  auto m2 = build_model<float>(small_config(v.size()), 6);
  pretrain_denoise(m2, train, valid, PretrainOptions{}, half,
                   {part_dir.string(), (part_dir / "metrics.jsonl").string(), false});
  auto m3 = build_model<float>(small_config(v.size()), 6);
  const auto resumed = pretrain_denoise(m3, train, valid, PretrainOptions{}, plan,
                                        {part_dir.string(), (part_dir / "metrics.jsonl").string(), true});

  EXPECT_EQ(full.valid_curve, resumed.valid_curve);
  EXPECT_EQ(full.selected_step, resumed.selected_step);
  for (const auto& [path, t] : m1.params()) EXPECT_TRUE(same_values(t, m3.params().at(path))) << path;
  // Post-resume loss stays within 5% of the uninterrupted trend (here it is exact).
  for (std::size_t i = 0; i < full.valid_curve.size(); ++i) {
    EXPECT_NEAR(resumed.valid_curve[i].second, full.valid_curve[i].second, 0.05 * full.valid_curve[i].second);
  }
  auto read = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(read(full_dir / "metrics.jsonl"), read(part_dir / "metrics.jsonl"));
  EXPECT_EQ(read(full_dir / "selected.ckpt"), read(part_dir / "selected.ckpt"));

  auto m4 = build_model<float>(small_config(v.size()), 6);
  EXPECT_THROW(pretrain_denoise(m4, train, valid, PretrainOptions{}, plan, {"", "", true}), ConfigError);
  EXPECT_THROW(pretrain_denoise(m4, train, valid, PretrainOptions{}, plan, {scratch_dir("none").string(), "", true}),
               IoError);
  fs::remove_all(full_dir);
  fs::remove_all(part_dir);
}

TEST(PretrainTest, MetricsLogRecordsEverySplit) {
  SyntheticLangSpec spec;
  spec.vocab_size = 20;
  spec.max_len = 6;
  spec.cipher = false;
  const Vocab v = Vocab::build(gen_monolingual(spec, 50));
  auto m = build_model<float>(small_config(v.size()), 6);
  TrainPlan plan;
  plan.max_steps = 4;
  plan.eval_interval = 2;
  plan.batch_tokens = 48;
  const auto dir = scratch_dir("metrics");
  fs::create_directories(dir);
  pretrain_denoise(m, mono_ids(spec, 50, Split::kTrain, v), mono_ids(spec, 10, Split::kValid, v), PretrainOptions{},
                   plan, {"", (dir / "m.jsonl").string(), false});
  std::ifstream in(dir / "m.jsonl");
  std::string line;
  std::size_t valid = 0, train = 0;
  while (std::getline(in, line)) {
    const auto j = json::parse(line);
    (j.at("split") == "valid" ? valid : train) += 1;
    EXPECT_TRUE(j.at("nll").is_number());
  }
  EXPECT_EQ(valid, 3u);  // steps 0, 2, 4
  EXPECT_EQ(train, 2u);
  fs::remove_all(dir);
}

// With a grammar, masked words are partly predictable from their neighbours,
// which puts the reconstruction floor well below half the step-0 NLL.
TEST(PretrainTest, ToyRunHalvesValidNll) {
  SyntheticLangSpec spec;
  spec.cipher = false;
  spec.branching = 3;
  const auto lines = gen_monolingual(spec, 20000);
  const Vocab v = Vocab::build(lines);
  auto cfg = ModelConfig::toy();
  cfg.vocab_size = v.size();
  cfg.max_positions = 64;
  auto model = build_model<float>(cfg, 7);
  TrainPlan plan;
  plan.max_steps = 2000;
  plan.eval_interval = 500;
  plan.batch_tokens = 256;
  plan.schedule = {100, 3e-3};
  const auto r = pretrain_denoise(model, mono_ids(spec, 20000, Split::kTrain, v), mono_ids(spec, 200, Split::kValid, v),
                                  PretrainOptions{}, plan);
  const double initial = r.valid_curve.front().second;
  for (const auto& [step, nll] : r.valid_curve) std::cout << "step " << step << " valid nll " << nll << "\n";
  EXPECT_LT(r.selected_valid_nll, 0.5 * initial);
}

}  // namespace
}  // namespace graftmt

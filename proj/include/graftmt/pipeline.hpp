// Run configuration and the commands behind the graftmt tool. Every command
// reads its inputs from the run's output directory and writes only under
// <output_dir>/<command>.
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "graftmt/checkpoint.hpp"
#include "graftmt/config.hpp"
#include "graftmt/data/corpus.hpp"
#include "graftmt/data/synthetic.hpp"
#include "graftmt/data/vocab.hpp"
#include "graftmt/eval/bleu.hpp"
#include "graftmt/freeze.hpp"
#include "graftmt/train.hpp"

namespace graftmt {

// Source side of a language pair; everything else comes from the target language.
struct PairSpec {
  std::uint64_t cipher_seed = 1;
  std::string script = "x";
  Reorder reorder = Reorder::kReverse;
  std::size_t rotate_k = 1;
  std::uint64_t seed = 1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PairSpec, cipher_seed, script, reorder, rotate_k, seed)

struct DataConfig {
  SyntheticLangSpec target = default_target();
  std::map<std::string, PairSpec> pairs = default_pairs();
  std::size_t mono_train = 20000;
  std::size_t mono_valid = 200;
  std::size_t train = 300;
  std::size_t valid = 100;
  std::size_t test = 100;
  // Joint body vocabulary holding every pair's source words as well. Off, the
  // body knows the target language only and sources go through an input module.
  bool shared_vocab = true;

  static SyntheticLangSpec default_target() {
    SyntheticLangSpec s;
    s.cipher = false;
    s.branching = 3;
    return s;
  }
  static std::map<std::string, PairSpec> default_pairs() {
    return {{"x-rev", {3, "x", Reorder::kReverse, 1, 3}},
            {"y-swap", {4, "y", Reorder::kSwapAdjacent, 1, 4}},
            {"z-rot", {5, "z", Reorder::kRotate, 2, 5}}};
  }

  [[nodiscard]] SyntheticLangSpec pair_language(const std::string& name) const {
    auto it = pairs.find(name);
    if (it == pairs.end()) throw ConfigError("unknown language pair '" + name + "'");
    SyntheticLangSpec s = target;
    s.cipher = true;
    s.cipher_seed = it->second.cipher_seed;
    s.script = it->second.script;
    s.reorder = it->second.reorder;
    s.rotate_k = it->second.rotate_k;
    s.seed = it->second.seed;
    return s;
  }

  void validate() const {
    target.validate();
    if (target.cipher || !target.script.empty()) throw ConfigError("data: the target language must be uncyphered with no script");
    if (pairs.empty()) throw ConfigError("data: at least one language pair is required");
    for (const auto& [name, p] : pairs) {
      if (name.empty() || !std::all_of(name.begin(), name.end(), [](char c) {
            return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_';
          })) {
        throw ConfigError("data: pair name '" + name + "' must use letters, digits, '-' or '_'");
      }
      if (p.script.empty()) throw ConfigError("data: pair '" + name + "' needs a script prefix");
    }
    if (mono_train == 0 || mono_valid == 0 || train == 0 || valid == 0 || test == 0) {
      throw ConfigError("data: every split size must be >= 1");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, target, pairs, mono_train, mono_valid, train, valid, test,
                                                shared_vocab)

struct RunConfig {
  std::string profile = "toy";
  std::uint64_t seed = 0;
  std::string output_dir = "runs/toy";
  std::size_t beam = 5;
  DataConfig data;
  ModelConfig model = toy_model();  // vocab_size is set from the body vocabulary
  PretrainOptions pretrain_options;
  TrainPlan pretrain = plan(1000, 3e-3, 250, "finetune-all");
  TrainPlan finetune = plan(300, 6e-3, 100, "bart-frozen");
  std::string finetune_pair = "x-rev";
  // Graft an input module even when the recipe does not require one.
  bool graft = false;
  // Fine-tune a freshly initialised body instead of the pretrained one.
  bool from_scratch = false;
  InputModuleConfig input_module = toy_input_module();  // src_vocab_size is set from the data
  AdapterConfig adapter = AdapterConfig::toy(AdapterKind::kPlain);
  TrainPlan round_robin = plan(300, 3e-3, 100, "finetune-all");

  static ModelConfig toy_model() {
    auto c = ModelConfig::toy();
    c.max_positions = 64;
    return c;
  }
  static InputModuleConfig toy_input_module() {
    auto c = InputModuleConfig::toy(256, 64);
    c.max_positions = 64;
    c.match_body_scale = true;
    c.dropout = c.attention_dropout = 0.1;
    return c;
  }
  static TrainPlan plan(std::size_t steps, double lr, std::size_t eval_interval, std::string recipe) {
    TrainPlan p;
    p.recipe = std::move(recipe);
    p.schedule = {100, lr};
    p.max_steps = steps;
    p.batch_tokens = 256;
    p.eval_interval = eval_interval;
    return p;
  }

  static RunConfig defaults(const std::string& profile) {
    RunConfig c;
    c.profile = profile;
    c.output_dir = "runs/" + profile;
    if (profile != "toy") {
      c.model = ModelConfig::profile(profile);
      c.input_module = InputModuleConfig::paper();
      c.adapter = AdapterConfig::paper(AdapterKind::kPlain);
      c.finetune.schedule = Schedule::frozen_bart();
      c.round_robin.schedule = Schedule::multilingual();
    }
    return c;
  }

  // Seed and beam are single knobs copied into every plan.
  void resolve() {
    for (TrainPlan* p : {&pretrain, &finetune, &round_robin}) {
      p->seed = seed;
      p->beam = beam;
    }
    validate();
  }

  void validate() const {
    ModelConfig::profile(profile);
    if (beam == 0) throw ConfigError("beam must be >= 1");
    data.validate();
    for (const TrainPlan* p : {&pretrain, &finetune, &round_robin}) p->validate();
    pretrain_options.noise.validate();
    adapter.validate();
    if (!data.pairs.count(finetune_pair)) throw ConfigError("finetune_pair '" + finetune_pair + "' is not a configured pair");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, profile, seed, output_dir, beam, data, model,
                                                pretrain_options, pretrain, finetune, finetune_pair, graft,
                                                from_scratch, input_module, adapter, round_robin)

// Profile defaults, then the file's keys on top. Unknown keys are rejected.
inline RunConfig load_run_config(const std::string& path, const std::optional<std::string>& profile = std::nullopt) {
  json patch = json::object();
  if (!path.empty()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config '" + path + "'");
    try {
      patch = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config '" + path + "': " + e.what());
    }
    if (!patch.is_object()) throw ConfigError("config '" + path + "' must hold a JSON object");
  }
  const std::string p = profile ? *profile : patch.value("profile", std::string("toy"));
  json base = RunConfig::defaults(p);
  const json flat_base = base.flatten();
  const json flat_patch = patch.empty() ? json::object() : patch.flatten();
  for (const auto& [key, value] : flat_patch.items()) {
    if (key.rfind("/data/pairs/", 0) == 0) continue;  // pair names are free-form
    if (!flat_base.contains(key)) throw ConfigError("config '" + path + "': unknown key '" + key + "'");
  }
  if (patch.contains("data") && patch["data"].contains("pairs")) base["data"]["pairs"] = json::object();
  base.merge_patch(patch);
  base["profile"] = p;
  try {
    return base.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return json::parse(in);
}

struct RunPaths {
  std::filesystem::path root;

  explicit RunPaths(const RunConfig& c) : root(c.output_dir) {}

  [[nodiscard]] std::filesystem::path data() const { return root / "data"; }
  [[nodiscard]] std::filesystem::path mono(Split s) const { return data() / (std::string("mono.") + split_name(s) + ".txt"); }
  [[nodiscard]] std::filesystem::path pair_file(const std::string& pair, Split s, const char* side) const {
    return data() / (pair + "." + split_name(s) + "." + side);
  }
  [[nodiscard]] std::filesystem::path body_vocab() const { return data() / "body.vocab"; }
  [[nodiscard]] std::filesystem::path source_vocab(const std::string& pair) const { return data() / (pair + ".src.vocab"); }
  [[nodiscard]] std::filesystem::path pretrain() const { return root / "pretrain"; }
  [[nodiscard]] std::filesystem::path body_checkpoint() const { return pretrain() / "selected.ckpt"; }
  [[nodiscard]] std::filesystem::path finetune(const std::string& pair) const { return root / "finetune" / pair; }
  [[nodiscard]] std::filesystem::path round_robin() const { return root / "round-robin"; }
};

inline void require_file(const std::filesystem::path& p, const char* hint) {
  if (!std::filesystem::exists(p)) throw IoError("missing '" + p.string() + "' (" + hint + ")");
}

// ---- gen-data

struct GeneratedData {
  Vocab body_vocab;
  std::map<std::string, Vocab> source_vocabs;
};

inline GeneratedData run_gen_data(const RunConfig& c) {
  const RunPaths paths(c);
  write_json(paths.data() / "config.json", c);
  std::vector<std::string> vocab_lines = gen_monolingual(c.data.target, c.data.mono_train);
  write_lines(paths.mono(Split::kTrain).string(), vocab_lines);
  write_lines(paths.mono(Split::kValid).string(), gen_monolingual(c.data.target, c.data.mono_valid, Split::kValid));
  GeneratedData out;
  for (const auto& [name, spec] : c.data.pairs) {
    const auto lang = c.data.pair_language(name);
    std::vector<std::string> sources;
    for (const auto& [split, n] : {std::pair{Split::kTrain, c.data.train}, {Split::kValid, c.data.valid},
                                   {Split::kTest, c.data.test}}) {
      const auto pairs = gen_parallel(lang, n, split);
      write_parallel(paths.pair_file(name, split, "src").string(), paths.pair_file(name, split, "tgt").string(), pairs);
      if (split != Split::kTrain) continue;
      for (const auto& p : pairs) {
        sources.push_back(p.src);
        vocab_lines.push_back(p.tgt);
        if (c.data.shared_vocab) vocab_lines.push_back(p.src);
      }
    }
    out.source_vocabs[name] = Vocab::build(sources);
    out.source_vocabs[name].save(paths.source_vocab(name).string());
  }
  out.body_vocab = Vocab::build(vocab_lines);
  out.body_vocab.save(paths.body_vocab().string());
  return out;
}

// ---- pretrain

template <typename T = float>
TrainOutcome<T> run_pretrain(const RunConfig& c) {
  const RunPaths paths(c);
  require_file(paths.body_vocab(), "run gen-data first");
  const auto vocab = Vocab::load(paths.body_vocab().string());
  ModelConfig mc = c.model;
  mc.vocab_size = vocab.size();
  RunConfig resolved = c;
  resolved.model = mc;
  write_json(paths.pretrain() / "config.json", resolved);
  auto encode = [&](Split s) {
    std::vector<std::vector<int>> out;
    for (const auto& l : read_lines(paths.mono(s).string())) out.push_back(vocab.encode(l));
    return out;
  };
  auto model = build_model<T>(mc, c.seed);
  auto outcome = pretrain_denoise(model, encode(Split::kTrain), encode(Split::kValid), c.pretrain_options, c.pretrain,
                                  {paths.pretrain().string(), (paths.pretrain() / "metrics.jsonl").string(), false});
  write_json(paths.pretrain() / "report.json",
             {{"selected_step", outcome.selected_step},
              {"selected_valid_nll", outcome.selected_valid_nll},
              {"steps", outcome.steps},
              {"valid_curve", outcome.valid_curve}});
  return outcome;
}

// ---- fine-tuning data

struct PairData {
  Vocab source_vocab;  // what the model reads the source with
  Vocab target_vocab;
  ParallelSplits splits;
  std::vector<TextPair> test_text;
};

// Source text goes through the pair's own vocabulary when the model carries an
// input module and through the body vocabulary otherwise.
inline PairData load_pair(const RunConfig& c, const std::string& pair, bool grafted) {
  const RunPaths paths(c);
  require_file(paths.body_vocab(), "run gen-data first");
  PairData d;
  d.target_vocab = Vocab::load(paths.body_vocab().string());
  if (grafted) {
    d.source_vocab = Vocab::load(paths.source_vocab(pair).string());
  } else {
    if (!c.data.shared_vocab) {
      throw ConfigError("pair '" + pair + "': without an input module the source is read with the body vocabulary, "
                        "which needs data.shared_vocab");
    }
    d.source_vocab = d.target_vocab;
  }
  auto split = [&](Split s) {
    require_file(paths.pair_file(pair, s, "src"), "run gen-data first");
    return read_parallel(paths.pair_file(pair, s, "src").string(), paths.pair_file(pair, s, "tgt").string());
  };
  d.test_text = split(Split::kTest);
  d.splits = {encode_pairs(split(Split::kTrain), d.source_vocab, d.target_vocab),
              encode_pairs(split(Split::kValid), d.source_vocab, d.target_vocab),
              encode_pairs(d.test_text, d.source_vocab, d.target_vocab)};
  return d;
}

template <typename T = float>
Seq2SeqModel<T> starting_body(const RunConfig& c) {
  const RunPaths paths(c);
  if (!c.from_scratch) {
    require_file(paths.body_checkpoint(), "run pretrain first");
    return load_checkpoint<T>(paths.body_checkpoint().string());
  }
  require_file(paths.body_vocab(), "run gen-data first");
  ModelConfig mc = c.model;
  mc.vocab_size = Vocab::load(paths.body_vocab().string()).size();
  return build_model<T>(mc, hash_combine(c.seed, 0xb0d1));
}

inline std::vector<std::string> decode_hypotheses(const EvalResult& r, const Vocab& vocab) {
  std::vector<std::string> out;
  out.reserve(r.hypotheses.size());
  for (const auto& h : r.hypotheses) out.push_back(vocab.decode(h));
  return out;
}

inline json eval_report(const EvalResult& r, const std::vector<std::string>& hyps, const std::vector<TextPair>& test) {
  std::vector<std::string> refs;
  for (const auto& p : test) refs.push_back(p.tgt);
  json j = r;
  j["bleu_text"] = bleu_corpus(hyps, refs);
  return j;
}

inline void append_test_metrics(const std::filesystem::path& metrics, const std::string& pair, std::size_t step,
                                const EvalResult& r) {
  MetricsLog log(metrics.string(), true);
  log.record({{"step", step}, {"split", "test"}, {"pair", pair}, {"bleu", r.bleu}});
}

// ---- finetune

template <typename T = float>
FinetuneResult<T> run_finetune(const RunConfig& c) {
  const RunPaths paths(c);
  auto body = starting_body<T>(c);
  const auto recipe = resolve_recipe(c.finetune.recipe, body.config());
  const bool graft = recipe.requires_graft || c.graft || body.grafted();
  auto data = load_pair(c, c.finetune_pair, graft);
  std::optional<InputModuleConfig> im;
  if (graft && !body.grafted()) {
    im = c.input_module;
    im->src_vocab_size = data.source_vocab.size();
  }
  const auto dir = paths.finetune(c.finetune_pair);
  RunConfig resolved = c;
  resolved.model = body.config();
  if (im) resolved.input_module = *im;
  write_json(dir / "config.json", resolved);
  auto r = finetune_bilingual(std::move(body), data.splits, c.finetune, im, c.adapter,
                              {dir.string(), (dir / "metrics.jsonl").string(), false});
  const auto hyps = decode_hypotheses(r.test, data.target_vocab);
  write_lines((dir / "test.hyp").string(), hyps);
  append_test_metrics(dir / "metrics.jsonl", c.finetune_pair, r.train.selected_step, r.test);
  json report = eval_report(r.test, hyps, data.test_text);
  report["selected_step"] = r.train.selected_step;
  report["selected_valid_nll"] = r.train.selected_valid_nll;
  report["recipe"] = recipe.name;
  report["grafted"] = graft;
  write_json(dir / "report.json", report);
  return r;
}

// ---- round-robin

template <typename T = float>
RoundRobinResult<T> run_round_robin(const RunConfig& c) {
  const RunPaths paths(c);
  auto body = starting_body<T>(c);
  if (body.grafted()) throw ConfigError("round-robin trains the body on every pair and cannot start from a grafted model");
  std::map<std::string, PairData> data;
  std::map<std::string, ParallelSplits> splits;
  for (const auto& [name, spec] : c.data.pairs) {
    data.emplace(name, load_pair(c, name, false));
    splits[name] = data.at(name).splits;
  }
  const auto dir = paths.round_robin();
  RunConfig resolved = c;
  resolved.model = body.config();
  write_json(dir / "config.json", resolved);
  auto r = round_robin(std::move(body), splits, c.round_robin, c.adapter,
                       {dir.string(), (dir / "metrics.jsonl").string(), false});
  json report = {{"selected_step", r.train.selected_step},
                 {"selected_valid_nll", r.train.selected_valid_nll},
                 {"forward_backward_passes", r.train.forward_backward_passes},
                 {"updates", r.train.updates},
                 {"pairs", json::object()}};
  for (const auto& [name, res] : r.per_pair) {
    const auto hyps = decode_hypotheses(res, data.at(name).target_vocab);
    write_lines((dir / (name + ".test.hyp")).string(), hyps);
    append_test_metrics(dir / "metrics.jsonl", name, r.train.selected_step, res);
    report["pairs"][name] = eval_report(res, hyps, data.at(name).test_text);
  }
  write_json(dir / "report.json", report);
  return r;
}

// ---- translate and evaluate

inline std::filesystem::path default_checkpoint(const RunConfig& c) {
  return RunPaths(c).finetune(c.finetune_pair) / "selected.ckpt";
}

// Beam-decodes each line of `input` into `output`.
template <typename T = float>
std::vector<std::string> run_translate(const RunConfig& c, const std::string& checkpoint, const std::string& input,
                                       const std::string& output) {
  require_file(checkpoint, "run finetune first or pass --checkpoint");
  auto model = load_checkpoint<T>(checkpoint);
  model.eval();
  const RunPaths paths(c);
  const Vocab target = Vocab::load(paths.body_vocab().string());
  const Vocab source = model.grafted() ? Vocab::load(paths.source_vocab(c.finetune_pair).string()) : target;
  write_json(paths.root / "translate" / "config.json",
             {{"run", c}, {"checkpoint", checkpoint}, {"input", input}, {"output", output}});
  std::vector<std::vector<int>> sources;
  for (const auto& line : read_lines(input)) sources.push_back(encode_source(source, line));
  std::vector<std::string> out;
  for (const auto& h : translate_all(model, sources, c.beam, c.finetune.max_decode_len)) out.push_back(target.decode(h.tokens));
  write_lines(output, out);
  return out;
}

// BLEU of a hypothesis file, and a paired bootstrap when a second system is given.
inline json run_evaluate_files(const RunConfig& c, const std::string& hyp, const std::string& ref,
                               const std::string& hyp_b = "") {
  const auto hyps = read_lines(hyp), refs = read_lines(ref);
  if (hyps.size() != refs.size()) {
    throw ContractError("evaluate: " + std::to_string(hyps.size()) + " hypotheses for " + std::to_string(refs.size()) +
                        " references");
  }
  json report = {{"hyp", hyp}, {"ref", ref}, {"bleu", bleu_corpus(hyps, refs)}, {"exact_match", exact_match(hyps, refs)}};
  if (!hyp_b.empty()) {
    const auto b = read_lines(hyp_b);
    const auto boot = paired_bootstrap(hyps, b, refs, 1000, c.seed);
    report["hyp_b"] = hyp_b;
    report["bleu_b"] = boot.bleu_b;
    report["p_value"] = boot.p_value;
    report["resamples"] = boot.resamples;
  }
  const auto dir = RunPaths(c).root / "evaluate";
  write_json(dir / "config.json", c);
  write_json(dir / "report.json", report);
  return report;
}

// Test-set evaluation of a fine-tuned checkpoint.
template <typename T = float>
json run_evaluate_checkpoint(const RunConfig& c, const std::string& checkpoint) {
  require_file(checkpoint, "run finetune first or pass --checkpoint");
  auto model = load_checkpoint<T>(checkpoint);
  const auto data = load_pair(c, c.finetune_pair, model.grafted());
  const auto r = evaluate(model, data.splits.test, data.splits.valid, c.finetune);
  const auto dir = RunPaths(c).root / "evaluate";
  json report = eval_report(r, decode_hypotheses(r, data.target_vocab), data.test_text);
  report["checkpoint"] = checkpoint;
  report["pair"] = c.finetune_pair;
  write_json(dir / "config.json", c);
  write_json(dir / "report.json", report);
  return report;
}

// ---- params and memory

// Parameter inventory of a profile's body after a recipe, grafted when the
// recipe needs an input module. Nothing is allocated.
inline ParamManifest recipe_inventory(const RunConfig& c, const Recipe& recipe) {
  ModelLayout layout{c.model, AdapterPlacement::kNone, {}, std::nullopt};
  if (recipe.requires_graft || c.graft) layout.input_module = c.input_module;
  auto m = layout_manifest(recipe_layout(layout, recipe, c.adapter));
  apply_policy(m, recipe.policy);
  return m;
}

inline std::vector<std::string> top_level_subtrees(const ParamManifest& m) {
  std::vector<std::string> out;
  for (const auto& e : m) {
    const auto head = e.path.substr(0, e.path.find('/'));
    if (std::find(out.begin(), out.end(), head) == out.end()) out.push_back(head);
  }
  return out;
}

inline std::string params_report(const RunConfig& c, const std::string& recipe_name) {
  const auto recipe = resolve_recipe(recipe_name, c.model);
  const auto m = recipe_inventory(c, recipe);
  const auto d = c.model.d_model;
  std::ostringstream os;
  os << "profile " << c.profile << ", recipe " << recipe.name << "\n";
  os << "subtree                 trainable          frozen\n";
  for (const auto& top : top_level_subtrees(m)) {
    char line[128];
    std::snprintf(line, sizeof line, "%-16s %16zu %15zu\n", top.c_str(),
                  count_params(m, top + "/**", CountMode::kAll, Membership::kTrainable),
                  count_params(m, top + "/**", CountMode::kAll, Membership::kFrozen));
    os << line;
  }
  os << "total trainable: " << count_params(m, "**", CountMode::kAll, Membership::kTrainable)
     << ", frozen: " << count_params(m, "**", CountMode::kAll, Membership::kFrozen) << "\n";
  os << "first-encoder self-attention (bias-free): "
     << count_params(m, "encoder/layer0/self_attn/**", CountMode::kBiasFree) << "\n";
  os << "4 d^2 at d=" << d << ": " << 4 * d * d << "\n";
  const auto norm_modules = body_norm_modules(c.model);
  os << "body layer-norm scalars: " << norm_modules * 2 * d << " (" << norm_modules << " modules x 2d); "
     << "24 * 2d = " << 24 * 2 * d << " (two norms in each of 24 layers; this body has two per encoder "
     << "layer and three per decoder layer)\n";
  if (!recipe.subset.empty()) os << "decoder subset weights (bias-free): " << subset_weight_count(m, recipe) << "\n";
  return os.str();
}

// Recipes the memory table compares, in the order they should come out.
inline std::vector<std::string> memory_comparison_recipes() {
  return {"finetune-all", "ft-enc-attn", "mbart-freeze-encoder", "mbart-freeze-decoder+decoder-adapters"};
}

struct MemoryRow {
  std::string recipe;
  MemoryReport report;
};

inline std::vector<MemoryRow> memory_rows(const RunConfig& c, const std::vector<std::string>& recipes,
                                          OptimizerKind optimizer) {
  std::vector<MemoryRow> rows;
  for (const auto& name : recipes) {
    const auto recipe = resolve_recipe(name, c.model);
    rows.push_back({recipe.name, memory_report(recipe_inventory(c, recipe), optimizer)});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const MemoryRow& a, const MemoryRow& b) { return a.report.bytes_total > b.report.bytes_total; });
  return rows;
}

inline std::string memory_table(const std::vector<MemoryRow>& rows) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-40s %14s %14s %16s %16s %8s\n", "recipe", "params", "trainable", "bytes_total",
                "bytes_optimizer", "train%");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-40s %14zu %14zu %16zu %16zu %7.2f%%\n", r.recipe.c_str(), r.report.total_params,
                  r.report.trainable_params, r.report.bytes_total, r.report.bytes_optimizer_state,
                  100.0 * r.report.trainable_fraction);
    os << line;
  }
  return os.str();
}

}  // namespace graftmt

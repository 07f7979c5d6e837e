// Training loops: denoising pretraining, bilingual fine-tuning and the
// round-robin multilingual scheduler, with best-valid or fixed-step selection,
// JSON-lines metrics and resumable state.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "graftmt/checkpoint.hpp"
#include "graftmt/data/noise.hpp"
#include "graftmt/data/synthetic.hpp"
#include "graftmt/data/vocab.hpp"
#include "graftmt/eval/beam.hpp"
#include "graftmt/eval/bleu.hpp"
#include "graftmt/freeze.hpp"
#include "graftmt/model.hpp"
#include "graftmt/optimizer.hpp"

namespace graftmt {

struct EncodedPair {
  std::vector<int> src;
  std::vector<int> tgt;

  friend bool operator==(const EncodedPair&, const EncodedPair&) = default;
};

struct ParallelSplits {
  std::vector<EncodedPair> train;
  std::vector<EncodedPair> valid;
  std::vector<EncodedPair> test;
};

// Source ids end with </s>, so the encoder always sees where the sentence stops.
inline std::vector<int> encode_source(const Vocab& vocab, const std::string& line) {
  auto ids = vocab.encode(line);
  ids.push_back(Special::kEos);
  return ids;
}

inline std::vector<EncodedPair> encode_pairs(const std::vector<TextPair>& pairs, const Vocab& src_vocab,
                                             const Vocab& tgt_vocab) {
  std::vector<EncodedPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    EncodedPair e{encode_source(src_vocab, p.src), tgt_vocab.encode(p.tgt)};
    if (e.src.size() < 2 || e.tgt.empty()) throw ContractError("encode_pairs: empty sentence in corpus");
    out.push_back(std::move(e));
  }
  return out;
}

enum class Selection { kBestValid, kFixedStep };

NLOHMANN_JSON_SERIALIZE_ENUM(Selection, {{Selection::kBestValid, "best-valid"}, {Selection::kFixedStep, "fixed-step"}})

struct TrainPlan {
  std::string recipe = "finetune-all";
  Schedule schedule{100, 1e-3};
  std::size_t max_steps = 500;
  std::size_t batch_tokens = 256;  // target tokens (with eos) per batch
  std::size_t eval_interval = 100;
  Selection selection = Selection::kBestValid;
  double label_smoothing = 0.1;
  double max_grad_norm = 1.0;
  std::uint64_t seed = 0;
  std::size_t beam = 5;
  std::size_t max_decode_len = 0;  // 0: 2 * source length + 5

  void validate() const {
    if (max_steps == 0) throw ConfigError("train plan: max_steps must be >= 1");
    if (batch_tokens == 0) throw ConfigError("train plan: batch_tokens must be >= 1");
    if (eval_interval == 0) throw ConfigError("train plan: eval_interval must be >= 1");
    if (beam == 0) throw ConfigError("train plan: beam must be >= 1");
    if (!(label_smoothing >= 0.0 && label_smoothing <= 1.0)) {
      throw ConfigError("train plan: label_smoothing must lie in [0, 1]");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainPlan, recipe, schedule, max_steps, batch_tokens, eval_interval,
                                                selection, label_smoothing, max_grad_norm, seed, beam,
                                                max_decode_len)

// Greedy packing by target tokens, in the given order.
inline std::vector<std::vector<std::size_t>> pack_batches(const std::vector<EncodedPair>& items,
                                                          const std::vector<std::size_t>& order,
                                                          std::size_t batch_tokens) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur;
  std::size_t tokens = 0;
  for (std::size_t i : order) {
    const std::size_t t = items[i].tgt.size() + 1;
    if (!cur.empty() && tokens + t > batch_tokens) {
      out.push_back(std::move(cur));
      cur.clear();
      tokens = 0;
    }
    cur.push_back(i);
    tokens += t;
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline PairBatch make_batch(const std::vector<EncodedPair>& items, const std::vector<std::size_t>& idx) {
  std::vector<std::vector<int>> src, tgt;
  src.reserve(idx.size());
  tgt.reserve(idx.size());
  for (std::size_t i : idx) {
    src.push_back(items[i].src);
    tgt.push_back(items[i].tgt);
  }
  return make_pair_batch(src, tgt);
}

// Endless shuffled batches; an exhausted epoch rewinds with a fresh order.
// The epoch's items come from `source`, so noised corpora are redrawn per epoch.
class BatchStream {
 public:
  using Source = std::function<std::vector<EncodedPair>(std::size_t epoch)>;

  BatchStream(Source source, std::size_t batch_tokens, std::uint64_t seed)
      : source_(std::move(source)), batch_tokens_(batch_tokens), seed_(seed) {
    load_epoch(0);
  }

  static BatchStream fixed(std::vector<EncodedPair> items, std::size_t batch_tokens, std::uint64_t seed) {
    if (items.empty()) throw ContractError("batch stream: empty corpus");
    auto shared = std::make_shared<const std::vector<EncodedPair>>(std::move(items));
    return BatchStream([shared](std::size_t) { return *shared; }, batch_tokens, seed);
  }

  PairBatch next() {
    if (cursor_ == batches_.size()) load_epoch(epoch_ + 1);
    ++served_;
    return make_batch(items_, batches_[cursor_++]);
  }

  [[nodiscard]] std::size_t epoch() const { return epoch_; }
  [[nodiscard]] std::size_t cursor() const { return cursor_; }
  [[nodiscard]] std::size_t served() const { return served_; }
  [[nodiscard]] std::size_t batches_per_epoch() const { return batches_.size(); }

  void restore(std::size_t epoch, std::size_t cursor, std::size_t served) {
    load_epoch(epoch);
    if (cursor > batches_.size()) throw StateError("batch stream: cursor past the end of the epoch");
    cursor_ = cursor;
    served_ = served;
  }

 private:
  void load_epoch(std::size_t e) {
    epoch_ = e;
    cursor_ = 0;
    items_ = source_(e);
    if (items_.empty()) throw ContractError("batch stream: empty corpus");
    std::vector<std::size_t> order(items_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(hash_combine(seed_, e));
    rng.shuffle(order.begin(), order.end());
    batches_ = pack_batches(items_, order, batch_tokens_);
  }

  Source source_;
  std::size_t batch_tokens_;
  std::uint64_t seed_;
  std::vector<EncodedPair> items_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::size_t served_ = 0;
};

// One JSON object per line: step, split, pair, and nll and/or bleu.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(std::string path, bool append = false) : path_(std::move(path)) {
    if (!path_.empty()) {
      const auto parent = std::filesystem::path(path_).parent_path();
      if (!parent.empty()) std::filesystem::create_directories(parent);
    }
    if (!path_.empty() && !append) {
      std::ofstream out(path_, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot write metrics '" + path_ + "'");
    }
  }

  void record(const json& rec) {
    records_.push_back(rec);
    if (path_.empty()) return;
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) throw IoError("cannot append to metrics '" + path_ + "'");
    out << rec.dump() << '\n';
  }

  [[nodiscard]] const std::vector<json>& records() const { return records_; }

 private:
  std::string path_;
  std::vector<json> records_;
};

template <typename T>
double mean_nll(const Seq2SeqModel<T>& model, const std::vector<EncodedPair>& items, std::size_t batch_tokens) {
  if (items.empty()) throw ContractError("mean_nll: empty evaluation set");
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& idx : pack_batches(items, order, batch_tokens)) {
    const auto batch = make_batch(items, idx);
    for (double v : model.sentence_nll(batch)) total += v;
    tokens += batch.target_tokens;
  }
  return total / static_cast<double>(tokens);
}

inline std::string ids_to_string(const std::vector<int>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(ids[i]);
  }
  return out;
}

inline std::vector<int> strip_eos(std::vector<int> ids) {
  auto it = std::find(ids.begin(), ids.end(), Special::kEos);
  ids.erase(it, ids.end());
  return ids;
}

struct EvalResult {
  double bleu = 0.0;
  double exact_match = 0.0;
  double valid_nll = 0.0;
  std::optional<double> p_value;
  std::size_t truncated = 0;
  std::vector<std::vector<int>> hypotheses;
};

inline void to_json(json& j, const EvalResult& r) {
  j = json{{"bleu", r.bleu}, {"exact_match", r.exact_match}, {"valid_nll", r.valid_nll}, {"truncated", r.truncated}};
  j["p_value"] = r.p_value ? json(*r.p_value) : json(nullptr);
}

template <typename T>
std::vector<Hypothesis> translate_all(const Seq2SeqModel<T>& model, const std::vector<std::vector<int>>& sources,
                                      std::size_t beam, std::size_t max_len = 0) {
  std::vector<Hypothesis> out;
  out.reserve(sources.size());
  for (const auto& s : sources) out.push_back(translate(model, s, {beam, max_len, true}));
  return out;
}

// Test-set decoding with BLEU and exact match over token ids, plus NLL on `valid`.
template <typename T>
EvalResult evaluate(Seq2SeqModel<T>& model, const std::vector<EncodedPair>& test, const std::vector<EncodedPair>& valid,
                    const TrainPlan& plan) {
  const bool was_training = model.training();
  model.eval();
  EvalResult r;
  if (!valid.empty()) r.valid_nll = mean_nll(model, valid, plan.batch_tokens);
  std::vector<std::vector<int>> sources;
  for (const auto& p : test) sources.push_back(p.src);
  std::vector<std::string> hyps, refs;
  for (const auto& h : translate_all(model, sources, plan.beam, plan.max_decode_len)) {
    r.truncated += h.truncated;
    r.hypotheses.push_back(strip_eos(h.tokens));
    hyps.push_back(ids_to_string(r.hypotheses.back()));
  }
  for (const auto& p : test) refs.push_back(ids_to_string(p.tgt));
  if (!test.empty()) {
    r.bleu = bleu_corpus(hyps, refs);
    r.exact_match = exact_match(hyps, refs);
  }
  model.train(was_training);
  return r;
}

struct RunFiles {
  std::string dir;      // checkpoints and trainer state; empty keeps everything in memory
  std::string metrics;  // JSON-lines path; empty disables the file
  bool resume = false;  // continue from the state in `dir`
};

template <typename T>
struct TrainOutcome {
  Seq2SeqModel<T> model;  // the selected model
  std::size_t selected_step = 0;
  double selected_valid_nll = std::numeric_limits<double>::infinity();
  std::size_t steps = 0;
  std::size_t forward_backward_passes = 0;
  std::size_t updates = 0;
  std::map<std::string, std::size_t> batches_served;
  std::vector<std::pair<std::size_t, double>> valid_curve;
  std::map<std::string, std::vector<std::pair<std::size_t, double>>> pair_valid_curves;
};

namespace detail {

struct NamedStream {
  std::string name;
  BatchStream* stream;
};

struct NamedValid {
  std::string name;
  const std::vector<EncodedPair>* items;
};

struct LoopOptions {
  bool divergence_check = false;
};

inline std::string state_path(const std::string& dir, const char* file) {
  return (std::filesystem::path(dir) / file).string();
}

// Shared optimisation loop. Each step draws one batch from every stream (in
// order) and applies one accumulated update.
template <typename T>
TrainOutcome<T> train_loop(Seq2SeqModel<T>& model, const TrainPlan& plan, std::vector<NamedStream> streams,
                           const std::vector<NamedValid>& valid, const RunFiles& files, const LoopOptions& lo) {
  plan.validate();
  if (streams.empty()) throw ContractError("train_loop: no data streams");
  if (valid.empty()) throw ContractError("train_loop: no validation data");
  MetricsLog log(files.metrics, files.resume);
  Adam<T> adam({0.9, 0.98, 1e-8, plan.max_grad_norm, plan.schedule});
  const bool persist = !files.dir.empty();
  if (persist) std::filesystem::create_directories(files.dir);

  std::size_t step = 0, passes = 0, updates = 0, over = 0;
  double initial = 0.0, best = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  std::optional<Seq2SeqModel<T>> best_model;
  std::vector<std::pair<std::size_t, double>> curve;
  std::map<std::string, std::vector<std::pair<std::size_t, double>>> pair_curves;
  std::map<std::string, std::pair<double, std::size_t>> train_loss;  // running sum and count since last eval

  if (files.resume) {
    if (!persist) throw ConfigError("resume requested without a run directory");
    std::ifstream in(state_path(files.dir, "trainer_state.json"));
    if (!in) throw IoError("no trainer state in '" + files.dir + "'");
    json st = json::parse(in);
    model.copy_values_from(load_checkpoint<T>(state_path(files.dir, "last.ckpt")));
    load_optimizer_state(adam, state_path(files.dir, "last.optim"));
    step = st.at("step").get<std::size_t>();
    passes = st.at("passes").get<std::size_t>();
    updates = st.at("updates").get<std::size_t>();
    over = st.at("over").get<std::size_t>();
    initial = st.at("initial_nll").get<double>();
    best = st.at("best_nll").get<double>();
    best_step = st.at("best_step").get<std::size_t>();
    curve = st.at("curve").get<decltype(curve)>();
    pair_curves = st.at("pair_curves").get<decltype(pair_curves)>();
    for (std::size_t i = 0; i < streams.size(); ++i) {
      const auto& s = st.at("streams").at(i);
      streams[i].stream->restore(s.at("epoch").get<std::size_t>(), s.at("cursor").get<std::size_t>(),
                                  s.at("served").get<std::size_t>());
    }
    if (std::filesystem::exists(state_path(files.dir, "best.ckpt"))) {
      auto b = model.clone();
      b.copy_values_from(load_checkpoint<T>(state_path(files.dir, "best.ckpt")));
      best_model.emplace(std::move(b));
    }
  }

  auto save_state = [&] {
    if (!persist) return;
    save_checkpoint(model, state_path(files.dir, "last.ckpt"), json{{"step", step}});
    save_optimizer_state(adam, state_path(files.dir, "last.optim"));
    json st{{"step", step},         {"passes", passes},  {"updates", updates}, {"over", over},
            {"initial_nll", initial}, {"best_nll", best}, {"best_step", best_step}, {"curve", curve},
            {"pair_curves", pair_curves}};
    st["streams"] = json::array();
    for (const auto& s : streams)
      st["streams"].push_back({{"name", s.name}, {"epoch", s.stream->epoch()}, {"cursor", s.stream->cursor()},
                               {"served", s.stream->served()}});
    std::ofstream out(state_path(files.dir, "trainer_state.json"), std::ios::binary | std::ios::trunc);
    out << st.dump(1) << '\n';
  };

  auto run_eval = [&] {
    model.eval();
    double sum = 0.0;
    for (const auto& v : valid) {
      const double nll = mean_nll(model, *v.items, plan.batch_tokens);
      sum += nll;
      pair_curves[v.name].emplace_back(step, nll);
      log.record({{"step", step}, {"split", "valid"}, {"pair", v.name}, {"nll", nll}});
    }
    for (auto& [name, acc] : train_loss) {
      if (acc.second) {
        log.record({{"step", step}, {"split", "train"}, {"pair", name}, {"nll", acc.first / static_cast<double>(acc.second)}});
      }
      acc = {0.0, 0};
    }
    model.train();
    const double agg = sum / static_cast<double>(valid.size());
    curve.emplace_back(step, agg);
    if (step == 0) initial = agg;
    if (lo.divergence_check && step > 0) {
      over = agg > 2.0 * initial ? over + 1 : 0;
      if (over >= 3) {
        throw DivergenceError("training diverged at step " + std::to_string(step) + ": valid NLL " +
                              std::to_string(agg) + " exceeded twice the initial " + std::to_string(initial) +
                              " for 3 consecutive evaluations");
      }
    }
    if (plan.selection == Selection::kBestValid && agg < best) {
      best = agg;
      best_step = step;
      best_model.emplace(model.clone());
      if (persist) save_checkpoint(model, state_path(files.dir, "best.ckpt"), json{{"step", step}});
    }
  };

  model.train();
  if (step == 0) {
    run_eval();
    save_state();
  }
  while (step < plan.max_steps) {
    std::vector<PairBatch> batches;
    batches.reserve(streams.size());
    for (auto& s : streams) batches.push_back(s.stream->next());
    const auto r = accumulate_cycle(adam, model, batches, {plan.label_smoothing, plan.seed, step * 64, {}});
    passes += r.forward_backward_passes;
    updates += r.updates;
    ++step;
    for (std::size_t i = 0; i < streams.size(); ++i) {
      auto& acc = train_loss[streams[i].name];
      acc.first += r.batch_losses[i];
      acc.second += 1;
    }
    if (step % plan.eval_interval == 0 || step == plan.max_steps) {
      run_eval();
      save_state();
    }
  }

  TrainOutcome<T> out{model.clone(), 0, best, step, passes, updates, {}, curve, pair_curves};
  for (const auto& s : streams) out.batches_served[s.name] = s.stream->served();
  if (plan.selection == Selection::kBestValid && best_model) {
    out.model.copy_values_from(*best_model);
    out.selected_step = best_step;
    out.selected_valid_nll = best;
  } else {
    out.selected_step = step;
    out.selected_valid_nll = curve.empty() ? best : curve.back().second;
  }
  out.model.eval();
  if (persist) save_checkpoint(out.model, state_path(files.dir, "selected.ckpt"), json{{"step", out.selected_step}});
  return out;
}

}  // namespace detail

struct PretrainOptions {
  NoiseSpec noise;
  std::size_t doc_sentences = 2;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainOptions, noise, doc_sentences)

// Consecutive sentences grouped into documents.
inline std::vector<std::vector<std::vector<int>>> make_documents(const std::vector<std::vector<int>>& sentences,
                                                                 std::size_t per_doc) {
  if (per_doc == 0) throw ConfigError("documents need at least one sentence");
  std::vector<std::vector<std::vector<int>>> docs;
  for (std::size_t i = 0; i < sentences.size(); i += per_doc) {
    const auto end = std::min(sentences.size(), i + per_doc);
    docs.emplace_back(sentences.begin() + static_cast<std::ptrdiff_t>(i),
                      sentences.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return docs;
}

// Source is the noised document, target the original one.
inline std::vector<EncodedPair> noised_pairs(const std::vector<std::vector<std::vector<int>>>& docs,
                                             const NoiseSpec& noise, std::uint64_t seed) {
  std::vector<EncodedPair> out;
  out.reserve(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    Rng rng(hash_combine(seed, i));
    EncodedPair p;
    p.src = noise_document(docs[i], noise, rng, Special::kMask).tokens;
    p.src.push_back(Special::kEos);
    for (const auto& s : docs[i]) p.tgt.insert(p.tgt.end(), s.begin(), s.end());
    if (p.tgt.empty()) throw ContractError("pretrain: empty document");
    out.push_back(std::move(p));
  }
  return out;
}

template <typename T>
TrainOutcome<T> pretrain_denoise(Seq2SeqModel<T>& model, const std::vector<std::vector<int>>& train_sentences,
                                 const std::vector<std::vector<int>>& valid_sentences, const PretrainOptions& opts,
                                 const TrainPlan& plan, const RunFiles& files = {}) {
  opts.noise.validate();
  if (train_sentences.empty() || valid_sentences.empty()) throw ContractError("pretrain: empty corpus");
  const auto docs = std::make_shared<const std::vector<std::vector<std::vector<int>>>>(
      make_documents(train_sentences, opts.doc_sentences));
  const auto valid = noised_pairs(make_documents(valid_sentences, opts.doc_sentences), opts.noise,
                                  hash_combine(plan.seed, 0x5a11d));
  const NoiseSpec noise = opts.noise;
  const std::uint64_t seed = plan.seed;
  BatchStream stream([docs, noise, seed](std::size_t epoch) { return noised_pairs(*docs, noise, hash_combine(seed, epoch + 1)); },
                     plan.batch_tokens, plan.seed);
  return detail::train_loop(model, plan, {{"denoise", &stream}}, {{"denoise", &valid}}, files, {true});
}

template <typename T>
struct FinetuneResult {
  TrainOutcome<T> train;
  EvalResult test;
};

template <typename T>
void prepare_for_recipe(Seq2SeqModel<T>& model, const Recipe& recipe, const std::optional<InputModuleConfig>& graft,
                        const AdapterConfig& adapter, std::uint64_t seed) {
  if (recipe.requires_graft && !graft && !model.grafted()) {
    throw ConfigError("recipe '" + recipe.name + "' freezes the body and needs an input module graft");
  }
  if (graft && !model.grafted()) model.graft(*graft, hash_combine(seed, 0x9a1f));
  apply_recipe(model, recipe, adapter, hash_combine(seed, 0xada9));
}

template <typename T>
FinetuneResult<T> finetune_bilingual(Seq2SeqModel<T> model, const ParallelSplits& data, const TrainPlan& plan,
                                     const std::optional<InputModuleConfig>& graft, const AdapterConfig& adapter,
                                     const RunFiles& files = {}) {
  if (data.train.empty() || data.valid.empty()) throw ContractError("finetune: train and valid splits are required");
  const auto recipe = resolve_recipe(plan.recipe, model.config());
  prepare_for_recipe(model, recipe, graft, adapter, plan.seed);
  auto stream = BatchStream::fixed(data.train, plan.batch_tokens, plan.seed);
  auto outcome = detail::train_loop(model, plan, {{"pair", &stream}}, {{"pair", &data.valid}}, files, {});
  auto test = evaluate(outcome.model, data.test, data.valid, plan);
  return {std::move(outcome), std::move(test)};
}

template <typename T>
struct RoundRobinResult {
  TrainOutcome<T> train;
  std::map<std::string, EvalResult> per_pair;
};

// One batch per pair per cycle, pairs in lexicographic order of their names,
// one update per cycle.
template <typename T>
RoundRobinResult<T> round_robin(Seq2SeqModel<T> model, const std::map<std::string, ParallelSplits>& pairs,
                                const TrainPlan& plan, const AdapterConfig& adapter = AdapterConfig::toy(AdapterKind::kPlain),
                                const RunFiles& files = {}, bool evaluate_pairs = true) {
  if (pairs.size() < 2) throw ContractError("round_robin: need at least 2 language pairs, got " + std::to_string(pairs.size()));
  const auto recipe = resolve_recipe(plan.recipe, model.config());
  prepare_for_recipe(model, recipe, std::nullopt, adapter, plan.seed);
  std::vector<BatchStream> streams;
  streams.reserve(pairs.size());
  std::size_t k = 0;
  for (const auto& [name, d] : pairs) streams.push_back(BatchStream::fixed(d.train, plan.batch_tokens, hash_combine(plan.seed, k++)));
  std::vector<detail::NamedStream> named;
  std::vector<detail::NamedValid> valid;
  k = 0;
  for (const auto& [name, d] : pairs) {
    named.push_back({name, &streams[k++]});
    valid.push_back({name, &d.valid});
  }
  RoundRobinResult<T> r{detail::train_loop(model, plan, named, valid, files, {}), {}};
  if (evaluate_pairs) {
    for (const auto& [name, d] : pairs) r.per_pair[name] = evaluate(r.train.model, d.test, d.valid, plan);
  }
  return r;
}

}  // namespace graftmt

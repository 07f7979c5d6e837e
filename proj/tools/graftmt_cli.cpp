// graftmt: data generation, pretraining, fine-tuning, decoding and accounting.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "graftmt/pipeline.hpp"

namespace {

using namespace graftmt;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> recipe;
  std::optional<std::string> profile;
  std::optional<std::size_t> beam;
  std::optional<std::string> output_dir;
  std::optional<std::string> pair;
};

void add_common(CLI::App* cmd, Common& o) {
  cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Seed for initialisation, batching and dropout");
  cmd->add_option("--recipe", o.recipe, "Freeze recipe name or recipe JSON file");
  cmd->add_option("--profile", o.profile, "Model profile")->check(CLI::IsMember({"toy", "bart", "mbart"}));
  cmd->add_option("--beam", o.beam, "Beam width")->check(CLI::PositiveNumber);
  cmd->add_option("--output-dir", o.output_dir, "Run directory");
  cmd->add_option("--pair", o.pair, "Language pair for finetune, translate and evaluate");
}

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Config file over profile defaults, then flags. `recipe_plan` receives --recipe.
RunConfig resolve(const Common& o, TrainPlan RunConfig::*recipe_plan) {
  RunConfig c = load_run_config(o.config, o.profile);
  if (o.seed) c.seed = *o.seed;
  if (o.beam) c.beam = *o.beam;
  if (o.output_dir) c.output_dir = *o.output_dir;
  if (o.pair) c.finetune_pair = *o.pair;
  if (o.recipe) {
    if (!recipe_plan) throw UsageError("--recipe does not apply to this command");
    (c.*recipe_plan).recipe = *o.recipe;
  }
  if (recipe_plan) {
    try {
      resolve_recipe((c.*recipe_plan).recipe, c.model);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
  c.resolve();
  return c;
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grafted machine translation on frozen pretrained seq2seq bodies"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every command");

  Common o;
  auto* gen = app.add_subcommand("gen-data", "Write synthetic monolingual and parallel corpora plus vocabularies");
  auto* pre = app.add_subcommand("pretrain", "Denoising pretraining of the body on monolingual text");
  auto* ft = app.add_subcommand("finetune", "Fine-tune on one language pair under a freeze recipe");
  auto* rr = app.add_subcommand("round-robin", "Multilingual fine-tuning, one batch per pair per update");
  auto* tr = app.add_subcommand("translate", "Beam-decode a file with a fine-tuned checkpoint");
  auto* ev = app.add_subcommand("evaluate", "BLEU of a checkpoint on the test split, or of hypothesis files");
  auto* pa = app.add_subcommand("params", "Trainable and frozen parameter counts for a recipe");
  auto* me = app.add_subcommand("memory", "Accounted training memory of several recipes");
  for (auto* cmd : {gen, pre, ft, rr, tr, ev, pa, me}) add_common(cmd, o);

  std::string checkpoint, input, output, hyp, ref, hyp_b, optimizer = "adam";
  tr->add_option("--checkpoint", checkpoint, "Checkpoint (default: the pair's selected fine-tuned model)");
  tr->add_option("--input", input, "Source text, one sentence per line")->required()->check(CLI::ExistingFile);
  tr->add_option("--output", output, "Destination (default: <output-dir>/translate/<pair>.hyp)");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint (default: the pair's selected fine-tuned model)");
  ev->add_option("--hyp", hyp, "Hypothesis file; switches to file scoring")->check(CLI::ExistingFile);
  ev->add_option("--ref", ref, "Reference file")->check(CLI::ExistingFile);
  ev->add_option("--hyp-b", hyp_b, "Second system for a paired bootstrap")->check(CLI::ExistingFile);
  me->add_option("--optimizer", optimizer, "Optimizer whose state is counted")->check(CLI::IsMember({"adam", "sgd"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) {
      const auto c = resolve(o, nullptr);
      const auto d = run_gen_data(c);
      std::cout << "wrote " << RunPaths(c).data().string() << " (body vocabulary " << d.body_vocab.size() << " tokens)\n";
    } else if (pre->parsed()) {
      const auto c = resolve(o, &RunConfig::pretrain);
      const auto r = run_pretrain(c);
      std::cout << "selected step " << r.selected_step << ", valid nll " << r.selected_valid_nll << "\n";
    } else if (ft->parsed()) {
      const auto c = resolve(o, &RunConfig::finetune);
      const auto r = run_finetune(c);
      std::cout << "selected step " << r.train.selected_step << ", test bleu " << r.test.bleu << "\n";
    } else if (rr->parsed()) {
      const auto c = resolve(o, &RunConfig::round_robin);
      const auto r = run_round_robin(c);
      std::cout << "passes " << r.train.forward_backward_passes << ", updates " << r.train.updates << "\n";
      for (const auto& [name, res] : r.per_pair) std::cout << name << " test bleu " << res.bleu << "\n";
    } else if (tr->parsed()) {
      const auto c = resolve(o, nullptr);
      if (checkpoint.empty()) checkpoint = default_checkpoint(c).string();
      if (output.empty()) output = (RunPaths(c).root / "translate" / (c.finetune_pair + ".hyp")).string();
      const auto lines = run_translate(c, checkpoint, input, output);
      std::cout << "translated " << lines.size() << " lines into " << output << "\n";
    } else if (ev->parsed()) {
      const auto c = resolve(o, nullptr);
      if (!hyp.empty() || !ref.empty() || !hyp_b.empty()) {
        if (hyp.empty() || ref.empty()) throw UsageError("file scoring needs both --hyp and --ref");
        print_json(run_evaluate_files(c, hyp, ref, hyp_b));
      } else {
        if (checkpoint.empty()) checkpoint = default_checkpoint(c).string();
        print_json(run_evaluate_checkpoint(c, checkpoint));
      }
    } else if (pa->parsed()) {
      const auto c = resolve(o, &RunConfig::finetune);
      const auto text = params_report(c, c.finetune.recipe);
      write_json(RunPaths(c).root / "params" / "config.json", c);
      write_lines((RunPaths(c).root / "params" / "report.txt").string(), {text});
      std::cout << text;
    } else if (me->parsed()) {
      const auto c = resolve(o, &RunConfig::finetune);
      auto recipes = memory_comparison_recipes();
      const auto chosen = resolve_recipe(c.finetune.recipe, c.model).name;
      if (o.recipe && std::find(recipes.begin(), recipes.end(), chosen) == recipes.end()) recipes.push_back(*o.recipe);
      const auto rows = memory_rows(c, recipes, optimizer == "sgd" ? OptimizerKind::kSgd : OptimizerKind::kAdam);
      const auto text = memory_table(rows);
      json report = json::array();
      for (const auto& r : rows) report.push_back({{"recipe", r.recipe}, {"report", r.report}});
      write_json(RunPaths(c).root / "memory" / "config.json", c);
      write_json(RunPaths(c).root / "memory" / "report.json", report);
      std::cout << text;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

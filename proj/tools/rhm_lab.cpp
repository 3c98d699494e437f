// rhm_lab: command-line entry point for the RHM lab pipeline.
//
// Exit codes: 0 success, 2 config or parameter error, 3 missing artifact,
// 4 numeric failure, 1 anything else.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <optional>

#include "rhm/error.hpp"
#include "rhm/pipeline.hpp"

namespace {

struct Common {
  std::string config;
  std::string out;
  bool force = false;
  std::optional<std::uint64_t> seed;
};

rhm::RunConfig load(const Common& c) {
  rhm::RunConfig cfg = rhm::load_run_config(c.config);
  if (c.seed) {
    cfg.set_seed(*c.seed);
    cfg.validate();
  }
  return cfg;
}

std::optional<rhm::EvalCondition> condition_of(const std::string& name) {
  if (name.empty()) return std::nullopt;
  return rhm::parse_condition(name);
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "run directory")->required();
  cmd->add_flag("--force", c.force, "overwrite existing artifacts");
  cmd->add_option("--seed", c.seed, "overrides the grammar, split and training seeds");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RHM lab: grammar generation, training, evaluation and analysis"};
  app.require_subcommand(1);

  Common common;
  std::string condition;
  std::optional<std::uint32_t> n_ct;
  std::uint64_t checkpoint = 0;
  std::optional<std::uint64_t> stop_at;
  std::size_t oracle_samples = 2048;
  bool verbose = false;

  auto* gen_grammar = app.add_subcommand("gen-grammar", "sample a grammar and write grammar.txt");
  add_common(gen_grammar, common);

  auto* gen_data = app.add_subcommand("gen-data", "write the split datasets under data/");
  add_common(gen_data, common);

  auto* episodes = app.add_subcommand("episodes", "dump evaluation episodes under episodes/");
  add_common(episodes, common);
  episodes->add_option("--condition", condition, "mem, ind, gensame or transfer");
  episodes->add_option("--n-ct", n_ct, "context sequences per episode");

  auto* train = app.add_subcommand("train", "train a model; writes checkpoints/ and metrics.csv");
  add_common(train, common);
  train->add_option("--stop-at", stop_at, "last step to run; the schedule still spans total_steps");
  train->add_flag("-v,--verbose", verbose, "print eval rows to stderr");

  auto* eval = app.add_subcommand("eval", "append condition accuracies for a checkpoint to eval.csv");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "checkpoint step")->required();
  eval->add_option("--condition", condition, "mem, ind, gensame or transfer");
  eval->add_option("--n-ct", n_ct, "context sequences per episode");

  auto* analyze = app.add_subcommand("analyze", "specialization, PCA and cluster CSVs for all checkpoints");
  add_common(analyze, common);

  auto* oracle = app.add_subcommand("oracle", "write Bayes-oracle ceilings to oracle.csv");
  add_common(oracle, common);
  oracle->add_option("--samples", oracle_samples, "queries per condition");

  CLI11_PARSE(app, argc, argv);

  try {
    const rhm::RunConfig cfg = load(common);
    const rhm::RunPaths paths{std::filesystem::path(common.out)};
    if (gen_grammar->parsed()) {
      rhm::cmd_gen_grammar(cfg, paths, common.force);
      std::cout << paths.grammar().string() << '\n';
    } else if (gen_data->parsed()) {
      rhm::cmd_gen_data(cfg, paths, common.force);
    } else if (episodes->parsed()) {
      rhm::cmd_episodes(cfg, paths, common.force, condition_of(condition), n_ct);
    } else if (train->parsed()) {
      rhm::TrainOptions opts;
      opts.stop_at = stop_at;
      opts.quiet = !verbose;
      const auto summary = rhm::cmd_train(cfg, paths, common.force, opts);
      std::cout << "checkpoints: " << summary.checkpoint_steps.size() << '\n';
    } else if (eval->parsed()) {
      for (const auto& r : rhm::cmd_eval(cfg, paths, checkpoint, condition_of(condition), n_ct)) {
        std::cout << rhm::to_string(r.condition) << ' ' << r.result.accuracy << " [" << r.result.ci_low
                  << ", " << r.result.ci_high << "]\n";
      }
    } else if (analyze->parsed()) {
      const auto s = rhm::cmd_analyze(cfg, paths, common.force);
      std::cout << "checkpoints: " << s.checkpoints << ", specialization rows: " << s.specialization_rows
                << '\n';
    } else if (oracle->parsed()) {
      const auto ceilings = rhm::cmd_oracle(cfg, paths, common.force, oracle_samples);
      for (std::size_t c = 0; c < ceilings.acc.size(); ++c) {
        if (ceilings.acc[c]) {
          std::cout << rhm::to_string(rhm::kAllConditions[c]) << ' ' << *ceilings.acc[c] << '\n';
        }
      }
    }
  } catch (const rhm::ConfigError& e) {
    std::cerr << "ConfigError: " << e.what() << '\n';
    return 2;
  } catch (const rhm::ParameterError& e) {
    std::cerr << "ParameterError: " << e.what() << '\n';
    return 2;
  } catch (const rhm::FormatError& e) {
    std::cerr << "FormatError: " << e.what() << '\n';
    return 2;
  } catch (const rhm::MissingArtifactError& e) {
    std::cerr << "MissingArtifactError: " << e.what() << '\n';
    return 3;
  } catch (const rhm::NonFiniteError& e) {
    std::cerr << "NonFiniteError: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

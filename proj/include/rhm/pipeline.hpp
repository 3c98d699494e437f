#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rhm/config.hpp"
#include "rhm/trainer.hpp"

namespace rhm {

// Artifact locations inside one run directory.
struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path grammar() const { return root / "grammar.txt"; }
  std::filesystem::path dataset(std::string_view name) const {
    return root / "data" / (std::string(name) + ".jsonl");
  }
  std::filesystem::path episodes(EvalCondition c) const {
    return root / "episodes" / (std::string(to_string(c)) + ".jsonl");
  }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path checkpoint(std::uint64_t step) const;
  std::filesystem::path metrics() const { return root / "metrics.csv"; }
  std::filesystem::path eval() const { return root / "eval.csv"; }
  std::filesystem::path oracle() const { return root / "oracle.csv"; }
  std::filesystem::path specialization() const { return root / "specialization.csv"; }
  std::filesystem::path pca() const { return root / "pca.csv"; }
  std::filesystem::path clusters() const { return root / "clusters.csv"; }
};

// Echoes the effective config into the run directory. An existing echo with
// different contents is refused unless `force`.
void claim_run_dir(const RunConfig& cfg, const RunPaths& paths, bool force);

Grammar load_grammar_file(const std::filesystem::path& path);
// Grammar from the run directory plus everything derived from it.
Experiment load_experiment(const RunConfig& cfg, const RunPaths& paths);

void cmd_gen_grammar(const RunConfig& cfg, const RunPaths& paths, bool force);
// train / heldout / withheld / gensame / transfer sets as dataset files.
void cmd_gen_data(const RunConfig& cfg, const RunPaths& paths, bool force);
// eval_episodes episodes per condition, drawn from the Eval stream.
void cmd_episodes(const RunConfig& cfg, const RunPaths& paths, bool force,
                  std::optional<EvalCondition> condition, std::optional<std::uint32_t> n_ct);

struct TrainOptions {
  std::optional<std::uint64_t> stop_at;
  bool quiet = true;
};
TrainSummary cmd_train(const RunConfig& cfg, const RunPaths& paths, bool force,
                       const TrainOptions& options = {});

struct EvalRow {
  std::uint64_t step;
  EvalCondition condition;
  std::uint32_t n_ct;
  EvalResult result;
};
inline constexpr const char* kEvalHeader = "step,condition,n_ct,accuracy,ci_low,ci_high,n";

// Appends one row per condition to eval.csv. Without a condition, all
// available conditions are evaluated.
std::vector<EvalRow> cmd_eval(const RunConfig& cfg, const RunPaths& paths, std::uint64_t step,
                              std::optional<EvalCondition> condition,
                              std::optional<std::uint32_t> n_ct);

// Steps of the checkpoints present in the run directory, ascending.
std::vector<std::uint64_t> list_checkpoints(const RunPaths& paths);

struct AnalysisSummary {
  std::size_t checkpoints = 0;
  std::size_t specialization_rows = 0;
  std::size_t pca_rows = 0;
  std::size_t cluster_rows = 0;
  std::vector<EvalCondition> conditions;     // analyzed
  std::vector<CurvePoint> curve;             // overall score per checkpoint
};

// Specialization, PCA and cluster CSVs over every checkpoint. Conditions
// without sequences are skipped.
AnalysisSummary cmd_analyze(const RunConfig& cfg, const RunPaths& paths, bool force);

struct OracleCeilings {
  std::array<std::optional<double>, 4> acc;
};
// Oracle accuracy per available condition, written as a metrics row at step -1.
OracleCeilings cmd_oracle(const RunConfig& cfg, const RunPaths& paths, bool force,
                          std::size_t samples = 2048);

}  // namespace rhm

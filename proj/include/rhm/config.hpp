#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "rhm/analysis.hpp"
#include "rhm/experiment.hpp"
#include "rhm/grammar.hpp"
#include "rhm/model.hpp"
#include "rhm/tasks.hpp"
#include "rhm/trainer.hpp"

namespace rhm {

struct AnalysisConfig {
  std::vector<EvalCondition> conditions{kAllConditions.begin(), kAllConditions.end()};
  std::uint32_t episodes = 64;
  std::uint32_t n_ct = 0;  // 0: use train.n_ct
  double cluster_threshold = 0.5;
  Aggregation aggregation = Aggregation::Mean;

  bool operator==(const AnalysisConfig&) const = default;
};

struct RunConfig {
  std::string run_id = "run";
  GrammarParams grammar;
  SplitSpec split;
  TaskOptions task;
  ModelConfig model;
  TrainConfig train;
  AnalysisConfig analysis;

  // Throws ParameterError when a component invariant fails.
  void validate() const;
  // Overrides the grammar, split and training seeds.
  void set_seed(std::uint64_t seed);

  bool operator==(const RunConfig&) const = default;
};

// Section keys mirror the struct field names. Missing keys take defaults
// (model.vocab -> v + 3, model.root_classes -> v, grammar.layer_dists ->
// uniform); unknown keys and ill-typed values throw ConfigError, invalid
// settings throw ParameterError.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::filesystem::path& path);
// Canonical text of the effective config.
std::string dump_run_config(const RunConfig& cfg);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RuleDistribution& d);
RuleDistribution rule_distribution_from_json(const nlohmann::json& j);

}  // namespace rhm

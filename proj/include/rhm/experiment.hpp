#pragma once

#include <string>
#include <vector>

#include "rhm/grammar.hpp"
#include "rhm/model.hpp"
#include "rhm/tasks.hpp"

namespace rhm {

struct TaskOptions {
  bool use_sep = false;
  // GenSame and Transfer demonstrations come from the condition's own set;
  // when false they come from train like Mem and Ind.
  bool contexts_from_condition = true;

  bool operator==(const TaskOptions&) const = default;
};

// Everything derived deterministically from a grammar and the split settings:
// the sequence sets behind each condition and the episode encoding.
struct Experiment {
  Grammar grammar;
  SplitSpec split;
  TaskOptions task;
  Splits splits;
  SequenceSet gensame;
  std::string gensame_unavailable;  // reason, when gensame is empty
  SequenceSet transfer;
  std::string transfer_unavailable;
  EncodeOptions encode;

  std::uint32_t v() const { return grammar.params().v; }
  bool available(EvalCondition c) const;
  const SequenceSet& queries(EvalCondition c) const;
  const SequenceSet& contexts(EvalCondition c) const;
  std::vector<RuleDistribution> dists(EvalCondition c) const;
};

Experiment build_experiment(const Grammar& grammar, const SplitSpec& split, const TaskOptions& task,
                            const ModelConfig& model);

// Encoded episodes of one condition. Throws ParameterError when the
// condition's set is empty or too small.
std::vector<TokenStream> make_streams(const Experiment& exp, EvalCondition condition,
                                      std::size_t n_ct, std::size_t count, Philox& rng);

}  // namespace rhm

#include "rhm/experiment.hpp"

#include "rhm/error.hpp"

namespace rhm {

bool Experiment::available(EvalCondition c) const { return !queries(c).empty(); }

const SequenceSet& Experiment::queries(EvalCondition c) const {
  switch (c) {
    case EvalCondition::Mem:
      return splits.train;
    case EvalCondition::Ind:
      return splits.heldout;
    case EvalCondition::GenSame:
      return gensame;
    case EvalCondition::Transfer:
      return transfer;
  }
  return splits.train;
}

const SequenceSet& Experiment::contexts(EvalCondition c) const {
  if (task.contexts_from_condition &&
      (c == EvalCondition::GenSame || c == EvalCondition::Transfer)) {
    return queries(c);
  }
  return splits.train;
}

std::vector<RuleDistribution> Experiment::dists(EvalCondition c) const {
  if (c == EvalCondition::Transfer && !split.transfer_dists.empty()) return split.transfer_dists;
  return grammar.params().layer_dists;
}

Experiment build_experiment(const Grammar& grammar, const SplitSpec& split, const TaskOptions& task,
                            const ModelConfig& model) {
  const std::uint32_t v = grammar.params().v;
  if (model.vocab < v + 3) throw ParameterError("experiment: model vocab must be at least v + 3");
  if (model.root_head && model.root_classes != v) {
    throw ParameterError("experiment: root_classes must equal the grammar vocabulary size");
  }
  Experiment exp{grammar, split, task, build_splits(grammar, split), {}, {}, {}, {}, {}};
  exp.encode.mode = model.mode;
  exp.encode.use_sep = task.use_sep;
  exp.encode.root_slot = model.root_head;
  exp.encode.specials = SpecialTokens::after(v);

  if (grammar.params().L >= 2) {
    try {
      Philox rng(split.seed, Stream::GenSame);
      exp.gensame = build_gen_same(grammar, exp.splits.train, split.holdout_combo_level, rng,
                                   split.gensame_samples);
    } catch (const InfeasibleError& e) {
      exp.gensame_unavailable = e.what();
    }
  } else {
    exp.gensame_unavailable = "gen-same needs L >= 2";
  }

  if (split.transfer_dists.empty()) {
    exp.transfer_unavailable = "no transfer_dists configured";
  } else {
    Philox rng(split.seed, Stream::Transfer);
    exp.transfer = build_transfer(grammar, split, rng);
  }
  return exp;
}

std::vector<TokenStream> make_streams(const Experiment& exp, EvalCondition condition,
                                      std::size_t n_ct, std::size_t count, Philox& rng) {
  const auto& queries = exp.queries(condition);
  if (queries.empty()) {
    throw ParameterError("condition '" + std::string(to_string(condition)) + "' has no sequences");
  }
  const auto& contexts = exp.contexts(condition);
  std::vector<TokenStream> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto ep = make_episode(contexts, queries, n_ct, rng, condition);
    out.push_back(encode(ep, exp.encode, exp.v()));
  }
  return out;
}

}  // namespace rhm

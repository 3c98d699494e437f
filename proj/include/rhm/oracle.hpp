#pragma once

#include <span>
#include <vector>

#include "rhm/grammar.hpp"
#include "rhm/rng.hpp"
#include "rhm/tasks.hpp"

namespace rhm {

struct PosteriorResult {
  std::vector<double> probs;  // over the final token x_d
  double support_count = 0;   // derivations consistent with the prefix
  Symbol argmax = 0;          // lowest id among ties
};

// Exact Bayes posterior of x_d given x_1..x_{d-1}.
//
// Bottom-up message passing over the fixed tree shape: every node carries the
// likelihood of its observed leaves for each symbol it could hold. Nodes on the
// right spine (ancestors of the unobserved leaf) carry one such vector per
// candidate final token. Cost is O(d * v * m * s) plus O(L * v^2 * m) on the spine.
//
// `layer_dists` defaults to the grammar's; `root_prior` defaults to uniform.
// Throws InconsistentPrefixError when no completion is generable.
PosteriorResult posterior_next_token(const Grammar& grammar, std::span<const Symbol> prefix,
                                     std::span<const RuleDistribution> layer_dists = {},
                                     std::span<const double> root_prior = {});

// Fraction of n_samples queries (drawn with replacement from `queries`) whose
// posterior argmax equals the true final token.
double oracle_accuracy(const Grammar& grammar, const SequenceSet& queries,
                       std::span<const RuleDistribution> layer_dists, std::size_t n_samples,
                       Philox& rng);

}  // namespace rhm

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rhm/rng.hpp"

namespace rhm {

using Symbol = std::uint32_t;

struct RuleDistribution {
  enum class Kind { Uniform, Zipf };

  Kind kind = Kind::Uniform;
  double exponent = 0.0;  // Zipf only

  static RuleDistribution uniform() { return {}; }
  static RuleDistribution zipf(double a) { return {Kind::Zipf, a}; }

  // Uniform and Zipf(0) describe the same distribution.
  double effective_exponent() const { return kind == Kind::Zipf ? exponent : 0.0; }
  bool equivalent(const RuleDistribution& other) const {
    return effective_exponent() == other.effective_exponent();
  }
  bool operator==(const RuleDistribution&) const = default;
};

std::string to_string(const RuleDistribution& dist);

// p_k = k^-a / sum_j j^-a for k = 1..m.
std::vector<double> zipf_probs(std::uint32_t m, double a);

struct GrammarParams {
  std::uint32_t v = 8;  // vocabulary size per level
  std::uint32_t m = 8;  // productions per symbol
  std::uint32_t s = 2;  // branching factor
  std::uint32_t L = 3;  // depth
  std::uint64_t seed = 0;
  // layer_dists[l - 1] governs rule choice at level l (l = L is the root).
  std::vector<RuleDistribution> layer_dists;

  static GrammarParams make(std::uint32_t v, std::uint32_t m, std::uint32_t s, std::uint32_t L,
                            std::uint64_t seed);

  // Throws ParameterError when the invariants do not hold.
  void validate() const;

  std::size_t length() const;          // d = s^L
  std::size_t internal_nodes() const;  // (s^L - 1) / (s - 1)
  const RuleDistribution& dist(std::uint32_t level) const;

  bool operator==(const GrammarParams&) const = default;
};

struct Sequence {
  std::vector<Symbol> tokens;
  Symbol root = 0;
  bool operator==(const Sequence&) const = default;
};

// Node layout is breadth-first from the root: level L holds node 0, level L-1
// holds nodes 1..s, and level l starts at (s^(L-l) - 1) / (s - 1).
struct DerivationTree {
  Symbol root = 0;
  std::vector<std::uint32_t> rules;  // chosen rule index per internal node
  std::vector<Symbol> leaves;

  Sequence sequence() const { return {leaves, root}; }
  bool operator==(const DerivationTree&) const = default;
};

struct TreeLayout {
  std::uint32_t s;
  std::uint32_t L;

  std::size_t level_offset(std::uint32_t level) const;
  std::size_t level_width(std::uint32_t level) const;
  std::size_t node_count() const;
  std::size_t leaf_count() const;
};

class Grammar {
 public:
  // tables[l - 1] is the flat (v x m x s) production table of level l.
  // Throws ParameterError on shape or unambiguity violations.
  Grammar(GrammarParams params, std::vector<std::vector<Symbol>> tables);

  const GrammarParams& params() const { return params_; }
  TreeLayout layout() const { return {params_.s, params_.L}; }

  std::span<const Symbol> production(std::uint32_t level, Symbol symbol, std::uint32_t rule) const;
  const std::vector<Symbol>& table(std::uint32_t level) const { return tables_.at(level - 1); }

  struct Match {
    Symbol symbol;
    std::uint32_t rule;
  };
  std::optional<Match> lookup(std::uint32_t level, std::span<const Symbol> tuple) const;

  // Same rule tables and parameters; layer_dists replaced.
  Grammar with_dists(std::vector<RuleDistribution> dists) const;

  bool operator==(const Grammar& other) const {
    return params_ == other.params_ && tables_ == other.tables_;
  }

 private:
  std::uint64_t tuple_code(std::span<const Symbol> tuple) const;

  GrammarParams params_;
  std::vector<std::vector<Symbol>> tables_;
  std::vector<std::unordered_map<std::uint64_t, std::uint32_t>> index_;
};

Grammar sample_grammar(const GrammarParams& params);

// Rule index draw at each internal node follows the grammar's layer_dists, or
// `dists` when given (one entry per level).
DerivationTree derive(const Grammar& grammar, Symbol root, Philox& rng);
DerivationTree derive(const Grammar& grammar, Symbol root, Philox& rng,
                      std::span<const RuleDistribution> dists);

// Deterministic expansion of recorded rule choices.
DerivationTree expand(const Grammar& grammar, Symbol root, std::span<const std::uint32_t> rules);

// Inverse of derive. Throws ParseError if the tokens are not generable.
DerivationTree parse(const Grammar& grammar, std::span<const Symbol> tokens);

// Symbol at every internal node, in the DerivationTree node order.
std::vector<Symbol> node_symbols(const Grammar& grammar, const DerivationTree& tree);

struct SequenceCount {
  bool overflow = false;
  std::uint64_t count = 0;  // valid when !overflow
  double log_count = 0.0;   // natural log, always valid
};

// Number of distinct sequences rooted at `root`: m^((s^L - 1)/(s - 1)).
SequenceCount count_sequences(const Grammar& grammar, Symbol root);

// Calls fn for every derivation rooted at `root`, in mixed-radix order of the
// rule-choice vector (last node varies fastest).
void enumerate_derivations(const Grammar& grammar, Symbol root,
                           const std::function<void(const DerivationTree&)>& fn);

}  // namespace rhm

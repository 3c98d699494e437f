#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "rhm/grammar.hpp"
#include "rhm/rng.hpp"

namespace rhm {

enum class EvalCondition { Mem, Ind, GenSame, Transfer };

inline constexpr std::array<EvalCondition, 4> kAllConditions = {
    EvalCondition::Mem, EvalCondition::Ind, EvalCondition::GenSame, EvalCondition::Transfer};

std::string_view to_string(EvalCondition c);
// Accepts "mem", "ind", "gensame" / "gen-same" / "gen_same", "transfer".
EvalCondition parse_condition(std::string_view name);

struct SplitSpec {
  double train_fraction = 0.5;
  // Level at which gen-same novelty is defined; 0 means the root level L.
  std::uint32_t holdout_combo_level = 0;
  // Fraction of (parent rule, child rules) combinations at holdout_combo_level
  // withheld from both train and held-out, so gen-same queries exist.
  double holdout_combo_fraction = 0.0;
  // Per-level rule distributions for the transfer condition; one per level.
  std::vector<RuleDistribution> transfer_dists;
  std::uint64_t seed = 0;
  // Distinct sequences drawn when the grammar is too large to enumerate.
  std::size_t sample_pool_size = 100000;
  // Samples drawn for the transfer set and (in sampling mode) the gen-same set.
  std::size_t transfer_samples = 4096;
  std::size_t gensame_samples = 4096;

  bool operator==(const SplitSpec&) const = default;
};

using SequenceSet = std::vector<DerivationTree>;

inline constexpr std::uint64_t kEnumerationLimit = 1'000'000;

struct Splits {
  SequenceSet train;
  SequenceSet heldout;
  SequenceSet withheld;  // sequences carrying a withheld combination
  bool enumerated = true;
};

// Signature of one internal node: (level, symbol, rule, child rules...).
struct ComboSignature {
  std::uint32_t level;
  Symbol symbol;
  std::uint32_t rule;
  std::vector<std::uint32_t> child_rules;
  bool operator==(const ComboSignature&) const = default;
};

std::uint32_t resolve_combo_level(const GrammarParams& params, std::uint32_t level);

// Combination signatures of every node at `level` (2 <= level <= L).
std::vector<ComboSignature> combo_signatures(const Grammar& grammar, const DerivationTree& tree,
                                             std::uint32_t level);

Splits build_splits(const Grammar& grammar, const SplitSpec& spec);

SequenceSet build_gen_same(const Grammar& grammar, const SequenceSet& train, std::uint32_t level,
                           Philox& rng, std::size_t max_samples = 4096);

SequenceSet build_transfer(const Grammar& grammar, const SplitSpec& spec, Philox& rng);

struct Episode {
  std::vector<Sequence> context;
  std::vector<Symbol> query_prefix;  // first d-1 tokens of the query
  Symbol target = 0;                 // d-th token of the query
  Symbol query_root = 0;
  EvalCondition condition = EvalCondition::Mem;
};

// Context sequences and the query are distinct draws from `source`.
Episode make_episode(const SequenceSet& source, std::size_t n_ct, Philox& rng,
                     EvalCondition condition);
// Context drawn from `context_source`, query from `query_source`.
Episode make_episode(const SequenceSet& context_source, const SequenceSet& query_source,
                     std::size_t n_ct, Philox& rng, EvalCondition condition);

enum class Objective { Causal, Masked };

std::string_view to_string(Objective o);
Objective parse_objective(std::string_view name);

struct SpecialTokens {
  std::uint32_t mask;
  std::uint32_t sep;
  std::uint32_t root;

  // mask = v, sep = v + 1, root = v + 2.
  static SpecialTokens after(std::uint32_t v) { return {v, v + 1, v + 2}; }
};

struct EncodeOptions {
  Objective mode = Objective::Causal;
  bool use_sep = false;
  bool root_slot = false;  // masked mode only
  SpecialTokens specials{8, 9, 10};
};

struct TokenStream {
  std::vector<std::uint32_t> ids;
  // Causal: ids.size() (the slot after the stream). Masked: the MASK index.
  std::size_t target_position = 0;
  std::optional<std::size_t> root_slot;
  std::size_t query_offset = 0;  // index of the query's first token
  std::uint32_t target = 0;
  std::uint32_t root_label = 0;
  // Extra (position, token) supervision from auxiliary context masking.
  std::vector<std::pair<std::size_t, std::uint32_t>> aux_targets;

  // Position whose logits predict the target token.
  std::size_t prediction_row() const {
    return target_position == ids.size() ? ids.size() - 1 : target_position;
  }
};

TokenStream encode(const Episode& episode, const EncodeOptions& options, std::uint32_t v);

struct DecodedStream {
  std::vector<std::vector<Symbol>> context;
  std::vector<Symbol> query_prefix;
  std::size_t target_position = 0;
};

DecodedStream decode(const TokenStream& stream, const EncodeOptions& options, std::size_t d,
                     std::size_t n_ct);

// Replaces each context token by MASK with probability p and records the
// original tokens as auxiliary targets. Masked mode only.
void apply_aux_masking(TokenStream& stream, const EncodeOptions& options, double p, Philox& rng);

}  // namespace rhm

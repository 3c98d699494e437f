#include "rhm/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "rhm/error.hpp"

namespace rhm {
namespace {

struct TokensHash {
  std::size_t operator()(const std::vector<Symbol>& tokens) const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (Symbol t : tokens) {
      h ^= t;
      h *= 0x100000001b3ull;
    }
    return static_cast<std::size_t>(h);
  }
};

using TokenSet = std::unordered_set<std::vector<Symbol>, TokensHash>;

std::uint64_t ipow(std::uint64_t base, std::uint64_t exp) {
  std::uint64_t r = 1;
  for (std::uint64_t i = 0; i < exp; ++i) r *= base;
  return r;
}

// Dense code of a combination at a fixed level: (symbol * m + rule) * m^s + children.
std::uint64_t combo_code(const GrammarParams& p, const ComboSignature& sig) {
  std::uint64_t children = 0;
  for (auto r : sig.child_rules) children = children * p.m + r;
  return (static_cast<std::uint64_t>(sig.symbol) * p.m + sig.rule) * ipow(p.m, p.s) + children;
}

std::uint64_t total_sequences(const Grammar& grammar) {
  const auto per_root = count_sequences(grammar, 0);
  if (per_root.overflow) return kEnumerationLimit + 1;
  if (per_root.count > kEnumerationLimit) return kEnumerationLimit + 1;
  return per_root.count * grammar.params().v;
}

// Distinct random indices in [0, n), in draw order (sparse Fisher-Yates).
std::vector<std::size_t> draw_distinct(std::size_t n, std::size_t k, Philox& rng) {
  std::unordered_map<std::size_t, std::size_t> swapped;
  std::vector<std::size_t> out;
  out.reserve(k);
  auto at = [&](std::size_t i) {
    const auto it = swapped.find(i);
    return it == swapped.end() ? i : it->second;
  };
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    const std::size_t vi = at(i);
    const std::size_t vj = at(j);
    swapped[j] = vi;
    out.push_back(vj);
  }
  return out;
}

template <class T>
void shuffle(std::vector<T>& items, Philox& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

// Largest-remainder allocation of round(fraction * total) across groups.
std::vector<std::size_t> allocate(const std::vector<std::size_t>& sizes, double fraction) {
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total)));
  std::vector<std::size_t> quota(sizes.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const double exact = fraction * static_cast<double>(sizes[i]);
    quota[i] = std::min(sizes[i], static_cast<std::size_t>(std::floor(exact)));
    assigned += quota[i];
    remainders.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (const auto& [rem, i] : remainders) {
    if (assigned >= target) break;
    if (quota[i] < sizes[i]) {
      ++quota[i];
      ++assigned;
    }
  }
  return quota;
}

std::unordered_set<std::uint64_t> choose_withheld_combos(const GrammarParams& p,
                                                         std::uint32_t level, double fraction,
                                                         std::uint64_t seed) {
  std::unordered_set<std::uint64_t> withheld;
  if (fraction <= 0.0) return withheld;
  const std::uint64_t per_rule = ipow(p.m, p.s);
  const auto n_w = std::min<std::uint64_t>(
      per_rule - 1, static_cast<std::uint64_t>(std::llround(fraction * static_cast<double>(per_rule))));
  Philox rng(seed, Stream::Split, 1);
  for (Symbol y = 0; y < p.v; ++y) {
    for (std::uint32_t k = 0; k < p.m; ++k) {
      const std::uint64_t base = (static_cast<std::uint64_t>(y) * p.m + k) * per_rule;
      for (auto c : draw_distinct(per_rule, n_w, rng)) withheld.insert(base + c);
    }
  }
  (void)level;
  return withheld;
}

bool has_withheld(const Grammar& g, const DerivationTree& t, std::uint32_t level,
                  const std::unordered_set<std::uint64_t>& withheld) {
  if (withheld.empty()) return false;
  for (const auto& sig : combo_signatures(g, t, level)) {
    if (withheld.count(combo_code(g.params(), sig))) return true;
  }
  return false;
}

}  // namespace

std::string_view to_string(EvalCondition c) {
  switch (c) {
    case EvalCondition::Mem:
      return "mem";
    case EvalCondition::Ind:
      return "ind";
    case EvalCondition::GenSame:
      return "gensame";
    case EvalCondition::Transfer:
      return "transfer";
  }
  return "?";
}

EvalCondition parse_condition(std::string_view name) {
  if (name == "mem") return EvalCondition::Mem;
  if (name == "ind") return EvalCondition::Ind;
  if (name == "gensame" || name == "gen-same" || name == "gen_same") return EvalCondition::GenSame;
  if (name == "transfer") return EvalCondition::Transfer;
  throw ParameterError("unknown condition '" + std::string(name) + "'");
}

std::string_view to_string(Objective o) { return o == Objective::Causal ? "causal" : "masked"; }

Objective parse_objective(std::string_view name) {
  if (name == "causal") return Objective::Causal;
  if (name == "masked") return Objective::Masked;
  throw ParameterError("unknown mode '" + std::string(name) + "'");
}

std::uint32_t resolve_combo_level(const GrammarParams& params, std::uint32_t level) {
  const std::uint32_t resolved = level == 0 ? params.L : level;
  if (resolved < 2 || resolved > params.L) {
    std::ostringstream os;
    os << "combination level must lie in [2, L=" << params.L << "], got " << resolved;
    throw ParameterError(os.str());
  }
  return resolved;
}

std::vector<ComboSignature> combo_signatures(const Grammar& grammar, const DerivationTree& tree,
                                             std::uint32_t level) {
  const auto& p = grammar.params();
  const auto layout = grammar.layout();
  const auto symbols = node_symbols(grammar, tree);
  const std::size_t offset = layout.level_offset(level);
  const std::size_t child_offset = layout.level_offset(level - 1);
  std::vector<ComboSignature> out;
  for (std::size_t i = 0; i < layout.level_width(level); ++i) {
    ComboSignature sig{level, symbols[offset + i], tree.rules[offset + i], {}};
    for (std::uint32_t c = 0; c < p.s; ++c) {
      sig.child_rules.push_back(tree.rules[child_offset + i * p.s + c]);
    }
    out.push_back(std::move(sig));
  }
  return out;
}

Splits build_splits(const Grammar& grammar, const SplitSpec& spec) {
  const auto& p = grammar.params();
  if (!(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0)) {
    throw ParameterError("split: train_fraction must lie in (0, 1]");
  }
  if (!(spec.holdout_combo_fraction >= 0.0 && spec.holdout_combo_fraction < 1.0)) {
    throw ParameterError("split: holdout_combo_fraction must lie in [0, 1)");
  }
  std::uint32_t level = 0;
  std::unordered_set<std::uint64_t> withheld;
  if (spec.holdout_combo_fraction > 0.0) {
    level = resolve_combo_level(p, spec.holdout_combo_level);
    withheld = choose_withheld_combos(p, level, spec.holdout_combo_fraction, spec.seed);
  }

  Splits out;
  std::vector<SequenceSet> per_root(p.v);
  if (total_sequences(grammar) <= kEnumerationLimit) {
    out.enumerated = true;
    for (Symbol y = 0; y < p.v; ++y) {
      enumerate_derivations(grammar, y, [&](const DerivationTree& t) {
        if (has_withheld(grammar, t, level, withheld)) {
          out.withheld.push_back(t);
        } else {
          per_root[y].push_back(t);
        }
      });
    }
  } else {
    out.enumerated = false;
    Philox rng(spec.seed, Stream::Split, 0);
    TokenSet seen;
    std::size_t kept = 0;
    const std::size_t max_attempts = 50 * spec.sample_pool_size + 1000;
    for (std::size_t attempt = 0; attempt < max_attempts && kept < spec.sample_pool_size;
         ++attempt) {
      const auto root = static_cast<Symbol>(rng.below(p.v));
      auto t = derive(grammar, root, rng);
      if (!seen.insert(t.leaves).second) continue;
      if (has_withheld(grammar, t, level, withheld)) {
        if (out.withheld.size() < spec.sample_pool_size) out.withheld.push_back(std::move(t));
      } else {
        per_root[root].push_back(std::move(t));
        ++kept;
      }
    }
  }

  std::vector<std::size_t> sizes;
  for (const auto& r : per_root) sizes.push_back(r.size());
  const auto quota = allocate(sizes, spec.train_fraction);
  for (Symbol y = 0; y < p.v; ++y) {
    Philox rng(spec.seed, Stream::Split, 2 + y);
    auto& pool = per_root[y];
    shuffle(pool, rng);
    out.train.insert(out.train.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(quota[y]));
    out.heldout.insert(out.heldout.end(), pool.begin() + static_cast<std::ptrdiff_t>(quota[y]), pool.end());
  }
  if (out.train.empty()) throw ParameterError("split: train_fraction yields an empty train set");
  return out;
}

SequenceSet build_gen_same(const Grammar& grammar, const SequenceSet& train, std::uint32_t level,
                           Philox& rng, std::size_t max_samples) {
  const auto& p = grammar.params();
  level = resolve_combo_level(p, level);
  const auto layout = grammar.layout();

  // Rules that occur in train, as (level, symbol, rule) codes.
  auto rule_code = [&](std::uint32_t lvl, Symbol y, std::uint32_t k) {
    return (static_cast<std::uint64_t>(lvl) * p.v + y) * p.m + k;
  };
  std::unordered_set<std::uint64_t> seen_rules;
  std::unordered_set<std::uint64_t> seen_combos;
  for (const auto& t : train) {
    const auto symbols = node_symbols(grammar, t);
    for (std::uint32_t lvl = p.L; lvl >= 1; --lvl) {
      const std::size_t off = layout.level_offset(lvl);
      for (std::size_t i = 0; i < layout.level_width(lvl); ++i) {
        seen_rules.insert(rule_code(lvl, symbols[off + i], t.rules[off + i]));
      }
    }
    for (const auto& sig : combo_signatures(grammar, t, level)) {
      seen_combos.insert(combo_code(p, sig));
    }
  }
  for (std::uint32_t lvl = 1; lvl <= p.L; ++lvl) {
    for (Symbol y = 0; y < p.v; ++y) {
      for (std::uint32_t k = 0; k < p.m; ++k) {
        if (!seen_rules.count(rule_code(lvl, y, k))) {
          std::ostringstream os;
          os << "gen-same: rule (level " << lvl << ", symbol " << y << ", rule " << k
             << ") never occurs in the train set";
          throw InfeasibleError(os.str());
        }
      }
    }
  }

  auto qualifies = [&](const DerivationTree& t) {
    const auto symbols = node_symbols(grammar, t);
    for (std::uint32_t lvl = p.L; lvl >= 1; --lvl) {
      const std::size_t off = layout.level_offset(lvl);
      for (std::size_t i = 0; i < layout.level_width(lvl); ++i) {
        if (!seen_rules.count(rule_code(lvl, symbols[off + i], t.rules[off + i]))) return false;
      }
    }
    for (const auto& sig : combo_signatures(grammar, t, level)) {
      if (!seen_combos.count(combo_code(p, sig))) return true;
    }
    return false;
  };

  SequenceSet out;
  if (total_sequences(grammar) <= kEnumerationLimit) {
    for (Symbol y = 0; y < p.v; ++y) {
      enumerate_derivations(grammar, y, [&](const DerivationTree& t) {
        if (qualifies(t)) out.push_back(t);
      });
    }
  } else {
    TokenSet dedup;
    const std::size_t max_attempts = 200 * max_samples + 10000;
    for (std::size_t attempt = 0; attempt < max_attempts && out.size() < max_samples; ++attempt) {
      auto t = derive(grammar, static_cast<Symbol>(rng.below(p.v)), rng);
      if (qualifies(t) && dedup.insert(t.leaves).second) out.push_back(std::move(t));
    }
  }
  if (out.empty()) {
    throw InfeasibleError("gen-same: every combination at the chosen level is covered by train");
  }
  return out;
}

SequenceSet build_transfer(const Grammar& grammar, const SplitSpec& spec, Philox& rng) {
  const auto& p = grammar.params();
  if (spec.transfer_dists.size() != p.L) {
    throw ParameterError("transfer: transfer_dists needs one entry per level");
  }
  bool differs = false;
  for (std::uint32_t lvl = 1; lvl <= p.L; ++lvl) {
    const auto& d = spec.transfer_dists[lvl - 1];
    if (d.kind == RuleDistribution::Kind::Zipf && !(d.exponent >= 0.0)) {
      throw ParameterError("transfer: Zipf exponent must be >= 0");
    }
    differs = differs || !d.equivalent(p.dist(lvl));
  }
  if (!differs) throw ParameterError("transfer: transfer_dists equal the training distributions");
  SequenceSet out;
  out.reserve(spec.transfer_samples);
  for (std::size_t i = 0; i < spec.transfer_samples; ++i) {
    const auto root = static_cast<Symbol>(rng.below(p.v));
    out.push_back(derive(grammar, root, rng, spec.transfer_dists));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episodes

namespace {

Episode episode_from(const SequenceSet& ctx_src, std::span<const std::size_t> ctx_idx,
                     const DerivationTree& query, EvalCondition condition) {
  Episode e;
  e.condition = condition;
  for (auto i : ctx_idx) e.context.push_back(ctx_src[i].sequence());
  e.query_prefix.assign(query.leaves.begin(), query.leaves.end() - 1);
  e.target = query.leaves.back();
  e.query_root = query.root;
  return e;
}

}  // namespace

Episode make_episode(const SequenceSet& source, std::size_t n_ct, Philox& rng,
                     EvalCondition condition) {
  if (source.size() < n_ct + 1) {
    std::ostringstream os;
    os << "episode: source has " << source.size() << " sequences, need " << n_ct + 1;
    throw ParameterError(os.str());
  }
  const auto idx = draw_distinct(source.size(), n_ct + 1, rng);
  return episode_from(source, std::span(idx).first(n_ct), source[idx.back()], condition);
}

Episode make_episode(const SequenceSet& context_source, const SequenceSet& query_source,
                     std::size_t n_ct, Philox& rng, EvalCondition condition) {
  if (&context_source == &query_source) return make_episode(query_source, n_ct, rng, condition);
  if (context_source.size() < n_ct || query_source.empty()) {
    throw ParameterError("episode: insufficient context or query sequences");
  }
  const auto idx = draw_distinct(context_source.size(), n_ct, rng);
  const auto q = static_cast<std::size_t>(rng.below(query_source.size()));
  return episode_from(context_source, idx, query_source[q], condition);
}

// ---------------------------------------------------------------------------
// Encoding

namespace {

void check_specials(const EncodeOptions& o, std::uint32_t v) {
  std::vector<std::uint32_t> used;
  if (o.mode == Objective::Masked) used.push_back(o.specials.mask);
  if (o.use_sep) used.push_back(o.specials.sep);
  if (o.root_slot) {
    if (o.mode != Objective::Masked) throw EncodingError("encode: root slot requires masked mode");
    used.push_back(o.specials.root);
  }
  for (std::size_t i = 0; i < used.size(); ++i) {
    if (used[i] < v) throw EncodingError("encode: special token id collides with grammar vocabulary");
    for (std::size_t j = 0; j < i; ++j) {
      if (used[i] == used[j]) throw EncodingError("encode: special token ids must be distinct");
    }
  }
}

}  // namespace

TokenStream encode(const Episode& episode, const EncodeOptions& options, std::uint32_t v) {
  check_specials(options, v);
  TokenStream s;
  auto push_tokens = [&](std::span<const Symbol> tokens) {
    for (Symbol t : tokens) {
      if (t >= v) throw EncodingError("encode: token id outside grammar vocabulary");
      s.ids.push_back(t);
    }
  };
  if (options.root_slot) {
    s.root_slot = 0;
    s.ids.push_back(options.specials.root);
  }
  for (const auto& seq : episode.context) {
    push_tokens(seq.tokens);
    if (options.use_sep) s.ids.push_back(options.specials.sep);
  }
  s.query_offset = s.ids.size();
  push_tokens(episode.query_prefix);
  if (options.mode == Objective::Masked) {
    s.target_position = s.ids.size();
    s.ids.push_back(options.specials.mask);
  } else {
    s.target_position = s.ids.size();
  }
  s.target = episode.target;
  s.root_label = episode.query_root;
  return s;
}

DecodedStream decode(const TokenStream& stream, const EncodeOptions& options, std::size_t d,
                     std::size_t n_ct) {
  DecodedStream out;
  std::size_t pos = options.root_slot ? 1 : 0;
  const std::size_t stride = d + (options.use_sep ? 1 : 0);
  const std::size_t expected = pos + n_ct * stride + (d - 1) + (options.mode == Objective::Masked ? 1 : 0);
  if (stream.ids.size() != expected) throw EncodingError("decode: stream length mismatch");
  for (std::size_t c = 0; c < n_ct; ++c) {
    out.context.emplace_back(stream.ids.begin() + static_cast<std::ptrdiff_t>(pos),
                             stream.ids.begin() + static_cast<std::ptrdiff_t>(pos + d));
    pos += stride;
  }
  out.query_prefix.assign(stream.ids.begin() + static_cast<std::ptrdiff_t>(pos),
                          stream.ids.begin() + static_cast<std::ptrdiff_t>(pos + d - 1));
  out.target_position = pos + d - 1;
  return out;
}

void apply_aux_masking(TokenStream& stream, const EncodeOptions& options, double p, Philox& rng) {
  if (options.mode != Objective::Masked) throw EncodingError("aux masking requires masked mode");
  if (p <= 0.0) return;
  const std::size_t begin = stream.root_slot ? 1 : 0;
  for (std::size_t i = begin; i < stream.query_offset; ++i) {
    const auto id = stream.ids[i];
    if (options.use_sep && id == options.specials.sep) continue;
    if (rng.uniform() < p) {
      stream.aux_targets.emplace_back(i, id);
      stream.ids[i] = options.specials.mask;
    }
  }
}

}  // namespace rhm

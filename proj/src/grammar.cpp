#include "rhm/grammar.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "rhm/error.hpp"

namespace rhm {
namespace {

// Saturating integer power; returns nullopt past 2^62.
std::optional<std::uint64_t> checked_pow(std::uint64_t base, std::uint64_t exp) {
  constexpr std::uint64_t kLimit = std::uint64_t{1} << 62;
  std::uint64_t result = 1;
  for (std::uint64_t i = 0; i < exp; ++i) {
    if (base != 0 && result > kLimit / base) return std::nullopt;
    result *= base;
  }
  return result;
}

std::vector<double> cumulative(std::span<const double> probs) {
  std::vector<double> cdf(probs.size());
  std::partial_sum(probs.begin(), probs.end(), cdf.begin());
  return cdf;
}

std::vector<std::vector<double>> level_cdfs(std::uint32_t m,
                                            std::span<const RuleDistribution> dists) {
  std::vector<std::vector<double>> cdfs;
  cdfs.reserve(dists.size());
  for (const auto& d : dists) cdfs.push_back(cumulative(zipf_probs(m, d.effective_exponent())));
  return cdfs;
}

}  // namespace

std::string to_string(const RuleDistribution& dist) {
  if (dist.kind == RuleDistribution::Kind::Uniform) return "uniform";
  std::ostringstream os;
  os.precision(17);
  os << "zipf(" << dist.exponent << ")";
  return os.str();
}

std::vector<double> zipf_probs(std::uint32_t m, double a) {
  if (m == 0) throw ParameterError("zipf_probs: m must be >= 1");
  if (!(a >= 0.0) || !std::isfinite(a)) throw ParameterError("zipf_probs: exponent must be >= 0");
  std::vector<double> p(m);
  double total = 0.0;
  for (std::uint32_t k = 1; k <= m; ++k) {
    p[k - 1] = std::pow(static_cast<double>(k), -a);
    total += p[k - 1];
  }
  for (auto& x : p) x /= total;
  return p;
}

// ---------------------------------------------------------------------------
// GrammarParams

GrammarParams GrammarParams::make(std::uint32_t v, std::uint32_t m, std::uint32_t s,
                                  std::uint32_t L, std::uint64_t seed) {
  GrammarParams p;
  p.v = v;
  p.m = m;
  p.s = s;
  p.L = L;
  p.seed = seed;
  p.layer_dists.assign(L, RuleDistribution::uniform());
  return p;
}

void GrammarParams::validate() const {
  if (v == 0) throw ParameterError("grammar: v must be positive");
  if (m == 0) throw ParameterError("grammar: m must be positive");
  if (s < 2) throw ParameterError("grammar: s must be >= 2");
  if (L < 1) throw ParameterError("grammar: L must be >= 1");
  if (!checked_pow(s, L)) throw ParameterError("grammar: s^L too large");
  const auto pool = checked_pow(v, s);
  if (!pool) throw ParameterError("grammar: v^s exceeds 2^62");
  if (static_cast<std::uint64_t>(m) * v > *pool) {
    std::ostringstream os;
    os << "grammar: m*v = " << static_cast<std::uint64_t>(m) * v << " exceeds v^s = " << *pool
       << "; productions cannot be unambiguous";
    throw ParameterError(os.str());
  }
  if (layer_dists.size() != L) {
    throw ParameterError("grammar: layer_dists must have exactly L entries");
  }
  for (const auto& d : layer_dists) {
    if (d.kind == RuleDistribution::Kind::Zipf && (!(d.exponent >= 0.0) || !std::isfinite(d.exponent))) {
      throw ParameterError("grammar: Zipf exponent must be finite and >= 0");
    }
  }
}

std::size_t GrammarParams::length() const { return *checked_pow(s, L); }

std::size_t GrammarParams::internal_nodes() const { return (length() - 1) / (s - 1); }

const RuleDistribution& GrammarParams::dist(std::uint32_t level) const {
  return layer_dists.at(level - 1);
}

// ---------------------------------------------------------------------------
// TreeLayout

std::size_t TreeLayout::level_offset(std::uint32_t level) const {
  return (*checked_pow(s, L - level) - 1) / (s - 1);
}

std::size_t TreeLayout::level_width(std::uint32_t level) const { return *checked_pow(s, L - level); }

std::size_t TreeLayout::node_count() const { return (*checked_pow(s, L) - 1) / (s - 1); }

std::size_t TreeLayout::leaf_count() const { return *checked_pow(s, L); }

// ---------------------------------------------------------------------------
// Grammar

Grammar::Grammar(GrammarParams params, std::vector<std::vector<Symbol>> tables)
    : params_(std::move(params)), tables_(std::move(tables)) {
  params_.validate();
  const auto& p = params_;
  if (tables_.size() != p.L) throw ParameterError("grammar: expected one rule table per level");
  const std::size_t entries = static_cast<std::size_t>(p.v) * p.m * p.s;
  index_.resize(p.L);
  for (std::uint32_t level = 1; level <= p.L; ++level) {
    const auto& t = tables_[level - 1];
    if (t.size() != entries) throw ParameterError("grammar: rule table has wrong size");
    auto& idx = index_[level - 1];
    idx.reserve(static_cast<std::size_t>(p.v) * p.m);
    for (Symbol y = 0; y < p.v; ++y) {
      for (std::uint32_t k = 0; k < p.m; ++k) {
        const auto tuple = production(level, y, k);
        for (Symbol c : tuple) {
          if (c >= p.v) throw ParameterError("grammar: production symbol out of range");
        }
        if (!idx.emplace(tuple_code(tuple), y * p.m + k).second) {
          std::ostringstream os;
          os << "grammar: duplicate production at level " << level << " (symbol " << y << ", rule "
             << k << ")";
          throw ParameterError(os.str());
        }
      }
    }
  }
}

std::span<const Symbol> Grammar::production(std::uint32_t level, Symbol symbol,
                                            std::uint32_t rule) const {
  const auto& t = tables_.at(level - 1);
  const std::size_t at = (static_cast<std::size_t>(symbol) * params_.m + rule) * params_.s;
  return std::span<const Symbol>(t).subspan(at, params_.s);
}

std::uint64_t Grammar::tuple_code(std::span<const Symbol> tuple) const {
  std::uint64_t code = 0;
  for (Symbol c : tuple) code = code * params_.v + c;
  return code;
}

std::optional<Grammar::Match> Grammar::lookup(std::uint32_t level,
                                              std::span<const Symbol> tuple) const {
  if (tuple.size() != params_.s) return std::nullopt;
  for (Symbol c : tuple) {
    if (c >= params_.v) return std::nullopt;
  }
  const auto& idx = index_.at(level - 1);
  const auto it = idx.find(tuple_code(tuple));
  if (it == idx.end()) return std::nullopt;
  return Match{it->second / params_.m, it->second % params_.m};
}

Grammar Grammar::with_dists(std::vector<RuleDistribution> dists) const {
  GrammarParams p = params_;
  p.layer_dists = std::move(dists);
  return Grammar(std::move(p), tables_);
}

// ---------------------------------------------------------------------------
// Sampling

Grammar sample_grammar(const GrammarParams& params) {
  params.validate();
  const std::uint64_t pool = *checked_pow(params.v, params.s);
  const std::size_t n = static_cast<std::size_t>(params.v) * params.m;

  std::vector<std::vector<Symbol>> tables(params.L);
  for (std::uint32_t level = 1; level <= params.L; ++level) {
    Philox rng(params.seed, Stream::Grammar, level);

    // Draw n distinct tuple codes uniformly; the draw order assigns them to
    // (symbol, rule) slots, giving a uniform injective assignment.
    std::vector<std::uint64_t> codes;
    codes.reserve(n);
    if (pool <= 2 * static_cast<std::uint64_t>(n)) {
      std::vector<std::uint64_t> all(pool);
      std::iota(all.begin(), all.end(), std::uint64_t{0});
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t j = i + rng.below(pool - i);
        std::swap(all[i], all[j]);
        codes.push_back(all[i]);
      }
    } else {
      std::unordered_set<std::uint64_t> seen;
      seen.reserve(2 * n);
      while (codes.size() < n) {
        const std::uint64_t c = rng.below(pool);
        if (seen.insert(c).second) codes.push_back(c);
      }
    }

    auto& table = tables[level - 1];
    table.resize(n * params.s);
    for (std::size_t slot = 0; slot < n; ++slot) {
      std::uint64_t code = codes[slot];
      for (std::uint32_t pos = params.s; pos-- > 0;) {
        table[slot * params.s + pos] = static_cast<Symbol>(code % params.v);
        code /= params.v;
      }
    }
  }
  return Grammar(params, std::move(tables));
}

// ---------------------------------------------------------------------------
// Derivation and parsing

DerivationTree derive(const Grammar& grammar, Symbol root, Philox& rng) {
  return derive(grammar, root, rng, grammar.params().layer_dists);
}

DerivationTree derive(const Grammar& grammar, Symbol root, Philox& rng,
                      std::span<const RuleDistribution> dists) {
  const auto& p = grammar.params();
  if (root >= p.v) throw ParameterError("derive: root symbol out of range");
  if (dists.size() != p.L) throw ParameterError("derive: need one distribution per level");
  const auto cdfs = level_cdfs(p.m, dists);

  DerivationTree tree;
  tree.root = root;
  tree.rules.reserve(p.internal_nodes());
  std::vector<Symbol> current{root};
  std::vector<Symbol> next;
  for (std::uint32_t level = p.L; level >= 1; --level) {
    next.clear();
    next.reserve(current.size() * p.s);
    for (Symbol y : current) {
      const auto k = static_cast<std::uint32_t>(rng.categorical(cdfs[level - 1]));
      tree.rules.push_back(k);
      const auto tuple = grammar.production(level, y, k);
      next.insert(next.end(), tuple.begin(), tuple.end());
    }
    current.swap(next);
  }
  tree.leaves = std::move(current);
  return tree;
}

DerivationTree expand(const Grammar& grammar, Symbol root, std::span<const std::uint32_t> rules) {
  const auto& p = grammar.params();
  if (root >= p.v) throw ParameterError("expand: root symbol out of range");
  if (rules.size() != p.internal_nodes()) throw ParameterError("expand: wrong rule-vector length");
  DerivationTree tree;
  tree.root = root;
  tree.rules.assign(rules.begin(), rules.end());
  std::vector<Symbol> current{root};
  std::vector<Symbol> next;
  std::size_t node = 0;
  for (std::uint32_t level = p.L; level >= 1; --level) {
    next.clear();
    for (Symbol y : current) {
      const std::uint32_t k = rules[node++];
      if (k >= p.m) throw ParameterError("expand: rule index out of range");
      const auto tuple = grammar.production(level, y, k);
      next.insert(next.end(), tuple.begin(), tuple.end());
    }
    current.swap(next);
  }
  tree.leaves = std::move(current);
  return tree;
}

DerivationTree parse(const Grammar& grammar, std::span<const Symbol> tokens) {
  const auto& p = grammar.params();
  const auto layout = grammar.layout();
  if (tokens.size() != p.length()) {
    std::ostringstream os;
    os << "parse: expected " << p.length() << " tokens, got " << tokens.size();
    throw ParseError(os.str());
  }
  DerivationTree tree;
  tree.leaves.assign(tokens.begin(), tokens.end());
  tree.rules.assign(p.internal_nodes(), 0);

  std::vector<Symbol> current(tokens.begin(), tokens.end());
  std::vector<Symbol> next;
  for (std::uint32_t level = 1; level <= p.L; ++level) {
    next.resize(current.size() / p.s);
    const std::size_t offset = layout.level_offset(level);
    for (std::size_t i = 0; i < next.size(); ++i) {
      const auto tuple = std::span<const Symbol>(current).subspan(i * p.s, p.s);
      const auto match = grammar.lookup(level, tuple);
      if (!match) {
        std::ostringstream os;
        os << "parse: no production at level " << level << " matches the tuple at node " << i;
        throw ParseError(os.str());
      }
      next[i] = match->symbol;
      tree.rules[offset + i] = match->rule;
    }
    current.swap(next);
  }
  tree.root = current.front();
  return tree;
}

std::vector<Symbol> node_symbols(const Grammar& grammar, const DerivationTree& tree) {
  const auto& p = grammar.params();
  std::vector<Symbol> symbols;
  symbols.reserve(p.internal_nodes());
  symbols.push_back(tree.root);
  std::size_t node = 0;
  for (std::uint32_t level = p.L; level >= 2; --level) {
    const std::size_t width = grammar.layout().level_width(level);
    for (std::size_t i = 0; i < width; ++i, ++node) {
      const auto tuple = grammar.production(level, symbols[node], tree.rules[node]);
      symbols.insert(symbols.end(), tuple.begin(), tuple.end());
    }
  }
  return symbols;
}

// ---------------------------------------------------------------------------
// Counting and enumeration

SequenceCount count_sequences(const Grammar& grammar, Symbol root) {
  const auto& p = grammar.params();
  if (root >= p.v) throw ParameterError("count_sequences: root symbol out of range");
  const std::size_t nodes = p.internal_nodes();
  SequenceCount out;
  out.log_count = static_cast<double>(nodes) * std::log(static_cast<double>(p.m));
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < nodes; ++i) {
    if (count > std::numeric_limits<std::uint64_t>::max() / p.m) {
      out.overflow = true;
      out.count = 0;
      return out;
    }
    count *= p.m;
  }
  out.count = count;
  return out;
}

void enumerate_derivations(const Grammar& grammar, Symbol root,
                           const std::function<void(const DerivationTree&)>& fn) {
  const auto& p = grammar.params();
  const auto total = count_sequences(grammar, root);
  if (total.overflow) throw ParameterError("enumerate_derivations: too many derivations");
  std::vector<std::uint32_t> rules(p.internal_nodes(), 0);
  for (std::uint64_t n = 0; n < total.count; ++n) {
    fn(expand(grammar, root, rules));
    for (std::size_t i = rules.size(); i-- > 0;) {
      if (++rules[i] < p.m) break;
      rules[i] = 0;
    }
  }
}

}  // namespace rhm

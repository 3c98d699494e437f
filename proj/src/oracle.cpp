#include "rhm/oracle.hpp"

#include <sstream>

#include "rhm/error.hpp"

namespace rhm {
namespace {

// Likelihood tables. Off-spine nodes use one column; spine nodes use v columns
// (one per candidate final token). Stored symbol-major: w[y * cols + c].
struct Message {
  std::size_t cols = 1;
  std::vector<double> w;
  double at(Symbol y, std::size_t c) const { return w[y * cols + (cols == 1 ? 0 : c)]; }
};

// Runs the upward pass with the given per-level rule weights and root weights.
std::vector<double> upward(const Grammar& grammar, std::span<const Symbol> prefix,
                           const std::vector<std::vector<double>>& rule_w,
                           std::span<const double> root_w) {
  const auto& p = grammar.params();
  const std::size_t v = p.v;
  const std::size_t d = p.length();

  std::vector<Message> level(d);
  for (std::size_t i = 0; i + 1 < d; ++i) {
    level[i].cols = 1;
    level[i].w.assign(v, 0.0);
    level[i].w[prefix[i]] = 1.0;
  }
  level[d - 1].cols = v;
  level[d - 1].w.assign(v * v, 0.0);
  for (std::size_t c = 0; c < v; ++c) level[d - 1].w[c * v + c] = 1.0;

  for (std::uint32_t lvl = 1; lvl <= p.L; ++lvl) {
    const std::size_t width = level.size() / p.s;
    std::vector<Message> next(width);
    const auto& weights = rule_w[lvl - 1];
    for (std::size_t i = 0; i < width; ++i) {
      const Message* children = &level[i * p.s];
      const std::size_t cols = children[p.s - 1].cols;
      Message& out = next[i];
      out.cols = cols;
      out.w.assign(v * cols, 0.0);
      for (Symbol y = 0; y < v; ++y) {
        for (std::uint32_t k = 0; k < p.m; ++k) {
          const auto tuple = grammar.production(lvl, y, k);
          double prod = weights[k];
          for (std::uint32_t j = 0; j + 1 < p.s && prod != 0.0; ++j) prod *= children[j].at(tuple[j], 0);
          if (prod == 0.0) continue;
          const Message& last = children[p.s - 1];
          for (std::size_t c = 0; c < cols; ++c) out.w[y * cols + c] += prod * last.at(tuple[p.s - 1], c);
        }
      }
    }
    level.swap(next);
  }

  const Message& root = level.front();
  std::vector<double> out(v, 0.0);
  for (Symbol y = 0; y < v; ++y) {
    if (root_w[y] == 0.0) continue;
    for (std::size_t c = 0; c < v; ++c) out[c] += root_w[y] * root.at(y, c);
  }
  return out;
}

}  // namespace

PosteriorResult posterior_next_token(const Grammar& grammar, std::span<const Symbol> prefix,
                                     std::span<const RuleDistribution> layer_dists,
                                     std::span<const double> root_prior) {
  const auto& p = grammar.params();
  if (prefix.size() + 1 != p.length()) {
    std::ostringstream os;
    os << "oracle: prefix must have " << p.length() - 1 << " tokens, got " << prefix.size();
    throw ParameterError(os.str());
  }
  for (Symbol t : prefix) {
    if (t >= p.v) throw InconsistentPrefixError("oracle: prefix token outside vocabulary");
  }
  if (layer_dists.empty()) layer_dists = p.layer_dists;
  if (layer_dists.size() != p.L) throw ParameterError("oracle: need one distribution per level");

  std::vector<double> prior(p.v, 1.0 / p.v);
  if (!root_prior.empty()) {
    if (root_prior.size() != p.v) throw ParameterError("oracle: root prior must have v entries");
    prior.assign(root_prior.begin(), root_prior.end());
  }

  std::vector<std::vector<double>> probs_w, count_w;
  for (const auto& dist : layer_dists) {
    probs_w.push_back(zipf_probs(p.m, dist.effective_exponent()));
    count_w.emplace_back(p.m, 1.0);
  }
  std::vector<double> support_roots(p.v);
  for (std::size_t y = 0; y < p.v; ++y) support_roots[y] = prior[y] > 0.0 ? 1.0 : 0.0;

  PosteriorResult r;
  r.probs = upward(grammar, prefix, probs_w, prior);
  const auto counts = upward(grammar, prefix, count_w, support_roots);
  for (double c : counts) r.support_count += c;

  double total = 0.0;
  for (double w : r.probs) total += w;
  if (!(total > 0.0)) throw InconsistentPrefixError("oracle: no generable completion for this prefix");
  for (auto& w : r.probs) w /= total;
  r.argmax = 0;
  for (Symbol c = 1; c < p.v; ++c) {
    if (r.probs[c] > r.probs[r.argmax]) r.argmax = c;
  }
  return r;
}

double oracle_accuracy(const Grammar& grammar, const SequenceSet& queries,
                       std::span<const RuleDistribution> layer_dists, std::size_t n_samples,
                       Philox& rng) {
  if (queries.empty()) throw ParameterError("oracle_accuracy: empty query set");
  if (n_samples == 0) throw ParameterError("oracle_accuracy: n_samples must be positive");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    const auto& q = queries[static_cast<std::size_t>(rng.below(queries.size()))];
    const auto prefix = std::span<const Symbol>(q.leaves).first(q.leaves.size() - 1);
    const auto post = posterior_next_token(grammar, prefix, layer_dists);
    if (post.argmax == q.leaves.back()) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n_samples);
}

}  // namespace rhm

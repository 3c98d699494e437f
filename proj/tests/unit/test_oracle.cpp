#include <cmath>
#include <numeric>
#include <algorithm>

#include "doctest.h"
#include "reference.hpp"
#include "rhm/error.hpp"
#include "rhm/oracle.hpp"
#include "rhm/tasks.hpp"

using namespace rhm;

namespace {

SequenceSet all_derivations(const Grammar& g) {
  SequenceSet out;
  for (Symbol r = 0; r < g.params().v; ++r) {
    enumerate_derivations(g, r, [&](const DerivationTree& t) { out.push_back(t); });
  }
  return out;
}

std::span<const Symbol> prefix_of(const DerivationTree& t) {
  return std::span<const Symbol>(t.leaves).first(t.leaves.size() - 1);
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace

TEST_SUITE("oracle") {
  TEST_CASE("m=1 posterior is one-hot") {
    const Grammar g = sample_grammar(GrammarParams::make(3, 1, 2, 2, 4));
    for (const auto& t : all_derivations(g)) {
      // Each consistent root forces one completion; distinct roots may disagree.
      const auto post = posterior_next_token(g, prefix_of(t));
      CHECK(post.support_count >= 1);
      CHECK(post.probs[t.leaves.back()] > 0.0);
      if (post.support_count == 1) CHECK(post.probs[t.leaves.back()] == 1.0);
      for (double p : post.probs) CHECK(p * post.support_count == doctest::Approx(std::round(p * post.support_count)));
    }
    const Grammar one = sample_grammar(GrammarParams::make(1, 1, 2, 2, 0));
    const std::vector<Symbol> zeros{0, 0, 0};
    const auto p = posterior_next_token(one, zeros);
    CHECK(p.probs == std::vector<double>{1.0});
    CHECK(p.support_count == 1);
  }

  TEST_CASE("posterior matches brute-force enumeration") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const Grammar g = sample_grammar(GrammarParams::make(2, 2, 2, 2, seed));
      const std::vector<RuleDistribution> dists(2);
      for (const auto& t : all_derivations(g)) {
        const auto post = posterior_next_token(g, prefix_of(t));
        const auto ref = ref::brute_posterior(g, prefix_of(t), dists);
        CHECK(max_abs_diff(post.probs, ref.probs) < 1e-12);
        CHECK(post.support_count == static_cast<double>(ref.support));
        CHECK(std::accumulate(post.probs.begin(), post.probs.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(post.argmax == ref::argmax_lowest(ref.probs));
      }
    }
  }

  TEST_CASE("posterior matches brute force at depth 3 with zipf levels") {
    const Grammar g = sample_grammar(GrammarParams::make(3, 2, 2, 3, 8));
    const std::vector<RuleDistribution> dists{RuleDistribution::zipf(1.3), RuleDistribution::uniform(),
                                              RuleDistribution::zipf(0.5)};
    Philox r(8, Stream::Oracle);
    for (int i = 0; i < 40; ++i) {
      const auto t = derive(g, static_cast<Symbol>(r.below(3)), r);
      const auto post = posterior_next_token(g, prefix_of(t), dists);
      const auto ref = ref::brute_posterior(g, prefix_of(t), dists);
      CHECK(max_abs_diff(post.probs, ref.probs) < 1e-12);
    }
  }

  TEST_CASE("zipf rule weights move the posterior") {
    const Grammar g = sample_grammar(GrammarParams::make(3, 2, 2, 2, 1));
    const std::vector<RuleDistribution> zipf{RuleDistribution::zipf(1), RuleDistribution::uniform()};
    const std::vector<RuleDistribution> uni(2);
    bool any_differs = false;
    for (const auto& t : all_derivations(g)) {
      const auto z = posterior_next_token(g, prefix_of(t), zipf);
      const auto u = posterior_next_token(g, prefix_of(t), uni);
      CHECK(max_abs_diff(z.probs, ref::brute_posterior(g, prefix_of(t), zipf).probs) < 1e-12);
      any_differs |= max_abs_diff(z.probs, u.probs) > 1e-6;
    }
    CHECK(any_differs);
  }

  TEST_CASE("inconsistent prefixes are rejected") {
    const Grammar g(GrammarParams::make(2, 1, 2, 2, 0), {{0, 0, 1, 1}, {0, 1, 1, 0}});
    // Level 1 only produces (0,0) and (1,1), so a leading (0,1) is impossible.
    const std::vector<Symbol> bad{0, 1, 0};
    CHECK_THROWS_AS(posterior_next_token(g, bad), InconsistentPrefixError);
    const std::vector<Symbol> short_prefix{0};
    CHECK_THROWS(posterior_next_token(g, short_prefix));
  }

  TEST_CASE("oracle accuracy of a deterministic grammar is 1") {
    const Grammar g = sample_grammar(GrammarParams::make(4, 1, 2, 3, 2));
    Philox r(2, Stream::Oracle);
    CHECK(oracle_accuracy(g, all_derivations(g), {}, 500, r) == 1.0);
  }

  TEST_CASE("oracle beats every fixed-token predictor") {
    const Grammar g = sample_grammar(GrammarParams::make(4, 3, 2, 2, 5));
    const auto all = all_derivations(g);
    // Exact expectation over the generative distribution (uniform here).
    double oracle = 0;
    std::vector<double> fixed(4, 0.0);
    for (const auto& t : all) {
      oracle += posterior_next_token(g, prefix_of(t)).argmax == t.leaves.back();
      fixed[t.leaves.back()] += 1;
    }
    for (double f : fixed) CHECK(oracle >= f);

    Philox r(5, Stream::Oracle);
    const std::size_t n = 4000;
    const double sampled = oracle_accuracy(g, all, {}, n, r);
    const double best_fixed = *std::max_element(fixed.begin(), fixed.end()) / all.size();
    CHECK(sampled >= best_fixed - 3 * std::sqrt(best_fixed * (1 - best_fixed) / n));
  }

  TEST_CASE("sampled oracle accuracy matches the exhaustive expectation on held-out") {
    const Grammar g = sample_grammar(GrammarParams::make(4, 2, 2, 2, 3));
    SplitSpec spec;
    spec.seed = 3;
    const auto s = build_splits(g, spec);
    const std::vector<RuleDistribution> dists(2);
    double expect = 0;
    for (const auto& t : s.heldout) {
      const auto ref = ref::brute_posterior(g, prefix_of(t), dists);
      expect += ref::argmax_lowest(ref.probs) == t.leaves.back();
    }
    expect /= static_cast<double>(s.heldout.size());
    const std::size_t n = 5000;
    Philox r(3, Stream::Oracle);
    const double got = oracle_accuracy(g, s.heldout, {}, n, r);
    CHECK(std::abs(got - expect) <= 3 * std::sqrt(expect * (1 - expect) / n) + 1e-12);
  }
}

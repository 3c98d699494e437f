#include <cmath>
#include <set>

#include "doctest.h"
#include "reference.hpp"
#include "rhm/error.hpp"
#include "rhm/grammar.hpp"

using namespace rhm;

namespace {

GrammarParams params(std::uint32_t v, std::uint32_t m, std::uint32_t s, std::uint32_t L,
                     std::uint64_t seed = 0) {
  return GrammarParams::make(v, m, s, L, seed);
}

// v=2, m=1, s=2, L=2 with level 2: 0->(0,1), 1->(1,0); level 1: 0->(0,0), 1->(1,1).
Grammar hand_grammar() {
  return Grammar(params(2, 1, 2, 2), {{0, 0, 1, 1}, {0, 1, 1, 0}});
}

}  // namespace

TEST_SUITE("grammar") {
  TEST_CASE("params validation") {
    CHECK_NOTHROW(params(2, 2, 2, 1).validate());
    CHECK_THROWS_AS(params(2, 3, 2, 1).validate(), ParameterError);  // m*v = 6 > 4
    CHECK_THROWS_AS(params(0, 1, 2, 1).validate(), ParameterError);
    CHECK_THROWS_AS(params(2, 1, 2, 0).validate(), ParameterError);
    auto p = params(2, 1, 2, 2);
    p.layer_dists.pop_back();
    CHECK_THROWS_AS(p.validate(), ParameterError);
    CHECK(params(3, 2, 2, 3).length() == 8);
    CHECK(params(3, 2, 3, 2).internal_nodes() == 4);
  }

  TEST_CASE("v=1, m=1, s=2, L=1 has the single rule 0 -> (0,0)") {
    const Grammar g = sample_grammar(params(1, 1, 2, 1, 5));
    const auto p = g.production(1, 0, 0);
    REQUIRE(p.size() == 2);
    CHECK(p[0] == 0);
    CHECK(p[1] == 0);
  }

  TEST_CASE("sampling is deterministic in the seed") {
    const Grammar a = sample_grammar(params(4, 2, 2, 3, 7));
    const Grammar b = sample_grammar(params(4, 2, 2, 3, 7));
    for (std::uint32_t l = 1; l <= 3; ++l) CHECK(a.table(l) == b.table(l));
    const Grammar c = sample_grammar(params(4, 2, 2, 3, 8));
    CHECK_FALSE(a.table(3) == c.table(3));
  }

  TEST_CASE("m*v = v^s boundary uses every tuple exactly once") {
    const Grammar g = sample_grammar(params(2, 2, 2, 1, 3));
    std::set<std::pair<Symbol, Symbol>> seen;
    for (Symbol y = 0; y < 2; ++y) {
      for (std::uint32_t k = 0; k < 2; ++k) {
        const auto t = g.production(1, y, k);
        seen.insert({t[0], t[1]});
      }
    }
    CHECK(seen.size() == 4);
  }

  TEST_CASE("unambiguity holds on every level for random grammars") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Grammar g = sample_grammar(params(5, 3, 2, 3, seed));
      for (std::uint32_t l = 1; l <= 3; ++l) {
        std::set<std::vector<Symbol>> tuples;
        for (Symbol y = 0; y < 5; ++y) {
          for (std::uint32_t k = 0; k < 3; ++k) {
            const auto t = g.production(l, y, k);
            tuples.insert({t.begin(), t.end()});
          }
        }
        CHECK(tuples.size() == 15);
      }
    }
  }

  TEST_CASE("constructor rejects ambiguous tables") {
    CHECK_THROWS_AS(Grammar(params(2, 1, 2, 1), {{0, 1, 0, 1}}), ParameterError);
    CHECK_THROWS_AS(Grammar(params(2, 1, 2, 1), {{0, 1}}), ParameterError);
  }

  TEST_CASE("m=1 derivation is the unique sequence for the root") {
    const Grammar g = sample_grammar(params(3, 1, 2, 2, 1));
    Philox a(1, Stream::Derivation);
    Philox b(99, Stream::Derivation, 4);
    CHECK(derive(g, 2, a).leaves == derive(g, 2, b).leaves);
  }

  TEST_CASE("s=2, L=3 gives 8 leaves and 7 internal nodes") {
    const Grammar g = sample_grammar(params(4, 2, 2, 3, 2));
    Philox r(0, Stream::Derivation);
    const auto t = derive(g, 1, r);
    CHECK(t.leaves.size() == 8);
    CHECK(t.rules.size() == 7);
    CHECK(expand(g, t.root, t.rules) == t);
  }

  TEST_CASE("uniform rule choice frequency is within 3 sigma of 1/2") {
    const Grammar g = sample_grammar(params(4, 2, 2, 2, 11));
    Philox r(11, Stream::Derivation);
    const int n = 100000;
    std::vector<int> ones(3, 0);
    for (int i = 0; i < n; ++i) {
      const auto t = derive(g, static_cast<Symbol>(r.below(4)), r);
      for (std::size_t node = 0; node < 3; ++node) ones[node] += t.rules[node] == 1;
    }
    const double sigma = std::sqrt(n * 0.25);
    for (int c : ones) CHECK(std::abs(c - n / 2.0) <= 3 * sigma);
  }

  TEST_CASE("parse inverts derive") {
    const Grammar g = sample_grammar(params(4, 3, 2, 3, 21));
    Philox r(21, Stream::Derivation);
    for (int i = 0; i < 10000; ++i) {
      const auto t = derive(g, static_cast<Symbol>(r.below(4)), r);
      REQUIRE(parse(g, t.leaves) == t);
    }
  }

  TEST_CASE("tokens from a grammar with disjoint tables fail to parse") {
    const Grammar a = hand_grammar();
    const Grammar b(params(2, 1, 2, 2), {{0, 1, 1, 0}, {0, 0, 1, 1}});
    Philox r(0, Stream::Derivation);
    const auto t = derive(a, 0, r);
    CHECK_THROWS_AS(parse(b, t.leaves), ParseError);
    const std::vector<Symbol> too_short{0, 0, 1};
    CHECK_THROWS_AS(parse(a, too_short), ParseError);
  }

  TEST_CASE("hand-built grammar parses (0,0,1,1) to root 0") {
    const Grammar g = hand_grammar();
    const std::vector<Symbol> tokens{0, 0, 1, 1};
    const auto t = parse(g, tokens);
    CHECK(t.root == 0);
    CHECK(t.rules == std::vector<std::uint32_t>{0, 0, 0});
    CHECK(node_symbols(g, t) == std::vector<Symbol>{0, 0, 1});
  }

  TEST_CASE("zipf_probs") {
    const auto u = zipf_probs(4, 0);
    for (double p : u) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));
    const auto a1 = zipf_probs(2, 1);
    CHECK(a1[0] == doctest::Approx(2.0 / 3).epsilon(1e-15));
    CHECK(a1[1] == doctest::Approx(1.0 / 3).epsilon(1e-15));
    const auto a2 = zipf_probs(3, 2);
    CHECK(a2[0] == doctest::Approx(36.0 / 49).epsilon(1e-15));
    CHECK(a2[1] == doctest::Approx(9.0 / 49).epsilon(1e-15));
    CHECK(a2[2] == doctest::Approx(4.0 / 49).epsilon(1e-15));
    CHECK_THROWS_AS(zipf_probs(0, 1), ParameterError);
    CHECK_THROWS_AS(zipf_probs(3, -1), ParameterError);
  }

  TEST_CASE("uniform and zipf(0) derive identical sequences") {
    auto p = params(4, 2, 2, 2, 6);
    const Grammar g = sample_grammar(p);
    const std::vector<RuleDistribution> zero(2, RuleDistribution::zipf(0));
    Philox a(6, Stream::Derivation);
    Philox b(6, Stream::Derivation);
    for (int i = 0; i < 100; ++i) CHECK(derive(g, 1, a) == derive(g, 1, b, zero));
  }

  TEST_CASE("count_sequences") {
    CHECK(count_sequences(sample_grammar(params(3, 1, 2, 3, 0)), 0).count == 1);
    CHECK(count_sequences(sample_grammar(params(4, 2, 2, 3, 0)), 0).count == 128);
    CHECK(count_sequences(sample_grammar(params(4, 3, 2, 2, 0)), 0).count == 27);
    const auto big = count_sequences(sample_grammar(params(8, 8, 2, 6, 0)), 0);
    CHECK(big.overflow);
    CHECK(big.log_count == doctest::Approx(63 * std::log(8.0)));
  }

  TEST_CASE("count_sequences agrees with the reference expansion") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const Grammar g = sample_grammar(params(3, 2, 2, 2, seed));
      const std::vector<RuleDistribution> u(2);
      for (Symbol r = 0; r < 3; ++r) {
        const auto all = ref::expand_all(g, r, 2, u);
        std::set<std::vector<Symbol>> distinct;
        for (const auto& w : all) distinct.insert(w.leaves);
        CHECK(distinct.size() == count_sequences(g, r).count);
      }
    }
  }

  TEST_CASE("enumerate_derivations visits each rule vector once in mixed-radix order") {
    const Grammar g = sample_grammar(params(3, 2, 2, 2, 4));
    std::vector<std::vector<std::uint32_t>> seen;
    enumerate_derivations(g, 1, [&](const DerivationTree& t) { seen.push_back(t.rules); });
    REQUIRE(seen.size() == 8);
    CHECK(seen.front() == std::vector<std::uint32_t>{0, 0, 0});
    CHECK(seen[1] == std::vector<std::uint32_t>{0, 0, 1});
    CHECK(seen.back() == std::vector<std::uint32_t>{1, 1, 1});
  }

  TEST_CASE("with_dists keeps the tables") {
    const Grammar g = sample_grammar(params(4, 2, 2, 2, 1));
    const Grammar z = g.with_dists({RuleDistribution::zipf(1), RuleDistribution::uniform()});
    CHECK(z.table(1) == g.table(1));
    CHECK(z.params().dist(1) == RuleDistribution::zipf(1));
  }
}

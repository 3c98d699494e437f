// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any fails. The desk-scale criteria train two full causal runs
// and a partial masked run; --skip-desk leaves them out for quick iteration.

#include <boost/math/distributions/chi_squared.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "reference.hpp"
#include "rhm/analysis.hpp"
#include "rhm/config.hpp"
#include "rhm/error.hpp"
#include "rhm/io.hpp"
#include "rhm/oracle.hpp"
#include "rhm/pipeline.hpp"
#include "rhm/trainer.hpp"

using namespace rhm;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kGradRelTol = 1e-4;
constexpr double kGradStep = 1e-3;
// Relative error denominator floor; coordinates whose analytic and numeric
// gradients are both below it are compared in absolute terms.
constexpr double kGradFloor = 1e-6;
constexpr std::size_t kGradCoordinates = 200;
// Diagnostic only: a step small enough that truncation error is negligible.
// Its rounding noise is ~1e-10 absolute, hence the larger floor.
constexpr double kGradFineStep = 1e-6;
constexpr double kGradFineFloor = 1e-4;
constexpr double kScheduleRelTol = 1e-12;
constexpr double kAdamTol = 1e-9;
constexpr double kOracleTol = 1e-12;
constexpr double kZipfMinP = 1e-3;
constexpr double kCeilingFraction = 0.95;
constexpr double kChanceSigmas = 3.0;

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

void skip(const std::string& name) { std::cout << "SKIP " << name << std::endl; }

std::string str(double x) {
  std::ostringstream os;
  os.precision(6);
  os << x;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Shape {
  std::uint32_t v, m, s, L;
};

// (v, m, s, L) with m*v <= v^s.
std::vector<Shape> valid_shapes(std::initializer_list<std::uint32_t> vs, std::initializer_list<std::uint32_t> ms,
                                std::initializer_list<std::uint32_t> ss, std::initializer_list<std::uint32_t> Ls) {
  std::vector<Shape> out;
  for (auto v : vs) {
    for (auto m : ms) {
      for (auto s : ss) {
        for (auto L : Ls) {
          if (static_cast<double>(m) * v <= std::pow(static_cast<double>(v), s)) out.push_back({v, m, s, L});
        }
      }
    }
  }
  return out;
}

void grammar_soundness() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto shapes = valid_shapes({2, 3, 4}, {1, 2, 3}, {2}, {1, 2, 3});
  std::size_t grammars = 0, derivations = 0, mismatches = 0;
  for (std::uint64_t seed = 0; grammars < 50 || seed < 3; ++seed) {
    for (const auto& sh : shapes) {
      const Grammar g = sample_grammar(GrammarParams::make(sh.v, sh.m, sh.s, sh.L, seed));
      Philox r(seed, Stream::Derivation, grammars);
      for (int i = 0; i < 200; ++i) {
        const auto t = derive(g, static_cast<Symbol>(r.below(sh.v)), r);
        try {
          mismatches += !(parse(g, t.leaves) == t);
        } catch (const ParseError&) {
          ++mismatches;
        }
        ++derivations;
      }
      ++grammars;
    }
  }
  const double secs = seconds_since(t0);
  report("grammar soundness", mismatches == 0 && secs < 60,
         std::to_string(grammars) + " grammars, " + std::to_string(derivations) + " derivations, " +
             std::to_string(mismatches) + " mismatches, " + str(secs) + " s");
}

void sequence_counting() {
  std::size_t configs = 0, bad = 0;
  for (const auto& sh : valid_shapes({1, 2, 3, 4}, {1, 2, 3}, {2, 3}, {1, 2, 3})) {
    const Grammar g = sample_grammar(GrammarParams::make(sh.v, sh.m, sh.s, sh.L, 7));
    const auto c = count_sequences(g, 0);
    if (c.overflow || c.count > 10000) continue;
    const std::vector<RuleDistribution> u(sh.L);
    for (Symbol root = 0; root < sh.v; ++root) {
      std::set<std::vector<Symbol>> distinct;
      for (const auto& w : ref::expand_all(g, root, sh.L, u)) distinct.insert(w.leaves);
      bad += distinct.size() != count_sequences(g, root).count;
    }
    ++configs;
  }
  report("sequence counting", bad == 0 && configs > 0,
         std::to_string(configs) + " configurations enumerated, " + std::to_string(bad) + " mismatches");
}

void zipf_fidelity() {
  const std::pair<std::uint32_t, double> cases[] = {{2, 1.0}, {3, 2.0}, {4, 0.0}};
  const std::size_t N = 100000;
  bool ok = true;
  std::string detail;
  for (const auto& [m, a] : cases) {
    auto p = GrammarParams::make(4, m, 2, 1, 11);
    p.layer_dists = {RuleDistribution::zipf(a)};
    const Grammar g = sample_grammar(p);
    Philox r(11, Stream::Derivation, m);
    std::vector<double> counts(m, 0.0);
    for (std::size_t i = 0; i < N; ++i) ++counts[derive(g, static_cast<Symbol>(r.below(4)), r).rules[0]];
    const auto probs = zipf_probs(m, a);
    double chi2 = 0;
    for (std::uint32_t k = 0; k < m; ++k) {
      const double e = probs[k] * N;
      chi2 += (counts[k] - e) * (counts[k] - e) / e;
    }
    const boost::math::chi_squared dist(m - 1);
    const double pval = boost::math::cdf(boost::math::complement(dist, chi2));
    ok &= pval > kZipfMinP;
    detail += "(m=" + std::to_string(m) + ",a=" + str(a) + ") p=" + str(pval) + " ";
  }
  report("zipf fidelity", ok, detail);
}

void gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  struct Case {
    const char* name;
    Objective mode;
    bool root;
  };
  bool ok = true;
  std::string detail;
  for (const Case k : {Case{"causal", Objective::Causal, false}, Case{"masked", Objective::Masked, false},
                       Case{"masked+root", Objective::Masked, true}}) {
    ModelConfig c;
    c.depth = 2;
    c.heads = 2;
    c.d_embed = 16;
    c.vocab = 8;  // 5 grammar tokens + MASK, SEP, ROOT
    c.mode = k.mode;
    c.root_head = k.root;
    c.root_classes = 5;
    Philox r(21, Stream::Init);
    const auto p = init_params<double>(c, r);
    const auto streams = ref::random_streams(c, 5, 4, 12, r, k.root);
    const std::span<const TokenStream> batch(streams);
    Philox coords(21, Stream::Oracle);
    const auto res = ref::grad_check(p, batch, c, {}, kGradCoordinates, coords, kGradStep, kGradFloor);
    Philox same(21, Stream::Oracle);
    const auto fine = ref::grad_check(p, batch, c, {}, kGradCoordinates, same, kGradFineStep, kGradFineFloor);
    ok &= res.max_rel_error < kGradRelTol;
    detail += std::string(k.name) + " max rel " + str(res.max_rel_error) + " (" + res.worst_tensor + ", " +
              std::to_string(res.checked) + " coords; h=1e-6 gives " + str(fine.max_rel_error) + ") ";
  }
  const double secs = seconds_since(t0);
  report("gradient correctness", ok && secs < 300, detail + str(secs) + " s");
}

void schedule_anchors() {
  TrainConfig c;
  c.total_steps = 200000;
  const double eta = c.eta;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::abs(b); };
  const double r0 = rel(lr_at(0, c), 0.01 * eta);
  const double rw = rel(lr_at(10000, c), eta);
  const double rT = rel(lr_at(200000, c), 0.1 * eta);
  report("schedule anchors", r0 < kScheduleRelTol && rw < kScheduleRelTol && rT < kScheduleRelTol,
         "relative errors " + str(r0) + ", " + str(rw) + ", " + str(rT));
}

void adamw_oracle() {
  TrainConfig c;
  std::vector<double> w{1.0}, g{1.0}, m{0.0}, v{0.0};
  adamw_update<double>(w, g, m, v, 1, 0.1, c, true);
  const double err = std::abs(w[0] - 0.700000001);

  ModelConfig mc;
  mc.depth = 1;
  mc.heads = 2;
  mc.d_embed = 8;
  mc.vocab = 7;
  Philox r(0, Stream::Init);
  auto p = init_params<double>(mc, r);
  const auto before = p;
  auto state = init_optim(p);
  adamw_step(p, zeros_like(p), state, 0.1, c);
  bool gains_kept = true, weights_decayed = true;
  std::vector<std::pair<const Tensor<double>*, TensorKind>> old;
  before.for_each([&](const std::string&, const Tensor<double>& t, TensorKind k) { old.push_back({&t, k}); });
  std::size_t i = 0;
  p.for_each([&](const std::string&, const Tensor<double>& t, TensorKind k) {
    const auto& prev = *old[i++].first;
    if (k == TensorKind::NormGain) {
      gains_kept &= t == prev;
    } else {
      weights_decayed &= (t - (1 - 0.1 * 2.0) * prev).cwiseAbs().maxCoeff() < 1e-15;
    }
  });
  report("adamw oracle", err < kAdamTol && gains_kept && weights_decayed,
         "|w' - 0.700000001| = " + str(err) + ", norm gains " + (gains_kept ? "exempt" : "decayed") +
             ", weights " + (weights_decayed ? "decayed" : "not decayed"));
}

void causality() {
  ModelConfig c;
  c.depth = 3;
  c.heads = 4;
  c.d_embed = 32;
  c.vocab = 11;
  Philox r(5, Stream::Analysis);
  const auto p = init_params<double>(c, r);
  std::size_t violations = 0, compared = 0;
  for (int n = 0; n < 100; ++n) {
    const std::size_t len = 4 + r.below(40);
    auto a = ref::random_streams(c, 8, 1, len, r);
    const std::size_t j = r.below(len);
    auto b = a;
    b[0].ids[j] = (b[0].ids[j] + 1 + static_cast<std::uint32_t>(r.below(7))) % 8;
    const auto ta = forward(p, std::span<const TokenStream>(a), c);
    const auto tb = forward(p, std::span<const TokenStream>(b), c);
    const auto bytes = j * c.vocab * sizeof(double);
    violations += std::memcmp(ta.logits.data(), tb.logits.data(), bytes) != 0;
    compared += j;
  }
  report("causality", violations == 0,
         "100 streams, " + std::to_string(compared) + " earlier positions compared bitwise, " +
             std::to_string(violations) + " violations");
}

void oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  std::size_t grammars = 0, prefixes = 0;
  for (const auto& sh : valid_shapes({1, 2, 3, 4}, {1, 2, 3}, {2}, {1, 2, 3})) {
    const Grammar g = sample_grammar(GrammarParams::make(sh.v, sh.m, sh.s, sh.L, 13));
    const std::vector<RuleDistribution> u(sh.L);
    Philox r(13, Stream::Oracle, grammars);
    for (int i = 0; i < 100; ++i) {
      const auto t = derive(g, static_cast<Symbol>(r.below(sh.v)), r);
      const std::span<const Symbol> prefix(t.leaves.data(), t.leaves.size() - 1);
      const auto dp = posterior_next_token(g, prefix);
      const auto bf = ref::brute_posterior(g, prefix, u);
      for (std::size_t k = 0; k < dp.probs.size(); ++k) worst = std::max(worst, std::abs(dp.probs[k] - bf.probs[k]));
      ++prefixes;
    }
    ++grammars;
  }
  report("oracle equivalence", worst < kOracleTol,
         std::to_string(grammars) + " grammars, " + std::to_string(prefixes) + " prefixes, max abs diff " +
             str(worst) + ", " + str(seconds_since(t0)) + " s");
}

void specialization_anchors(const std::vector<double>* measured) {
  const auto g = RelationGrouping::build(2, 3, 8, false);
  const double uniform = specialization_score(Eigen::MatrixXd::Constant(8, 8, 0.125), g);
  Eigen::MatrixXd det(8, 8);
  const double values[] = {0.4, 0.2, 0.1, 0.05};
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 8; ++j) det(i, j) = values[g.at(i, j)];
  }
  const double deterministic = specialization_score(det, g);
  bool in_range = true;
  std::string range = "no desk scores";
  if (measured) {
    double lo = 1, hi = 0;
    for (double s : *measured) {
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
    in_range = !measured->empty() && lo >= 0.0 && hi <= 1.0;
    range = std::to_string(measured->size()) + " desk scores in [" + str(lo) + ", " + str(hi) + "]";
  }
  report("specialization anchors", uniform == 0.0 && deterministic == 1.0 && in_range,
         "uniform " + str(uniform) + ", h-deterministic " + str(deterministic) + ", " + range);
}

std::string fnv1a(const std::string& data) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<double> specialization_scores(const fs::path& csv) {
  std::istringstream in(read_text_file(csv));
  std::string line;
  std::getline(in, line);
  std::vector<double> out;
  while (std::getline(in, line)) out.push_back(std::stod(line.substr(line.rfind(',') + 1)));
  return out;
}

double score_at(const AnalysisSummary& a, std::int64_t step) {
  for (const auto& p : a.curve) {
    if (p.step == step) return p.score;
  }
  throw MissingArtifactError("no analysis of step " + std::to_string(step));
}

struct DeskRun {
  RunPaths paths;
  double train_seconds = 0;
};

DeskRun run_desk(const RunConfig& cfg, const fs::path& dir, std::optional<std::uint64_t> stop_at = {}) {
  DeskRun run{{dir}, 0};
  fs::remove_all(dir);
  cmd_gen_grammar(cfg, run.paths, false);
  cmd_gen_data(cfg, run.paths, false);
  const auto t0 = std::chrono::steady_clock::now();
  cmd_train(cfg, run.paths, false, {stop_at, true});
  run.train_seconds = seconds_since(t0);
  std::cout << "  trained " << dir.filename().string() << " in " << str(run.train_seconds) << " s" << std::endl;
  return run;
}

void desk_criteria(const fs::path& config_path, const fs::path& work) {
  const RunConfig cfg = load_run_config(config_path);
  const std::uint64_t T = cfg.train.total_steps;
  const std::uint64_t quarter = T / 4;

  // Learning.
  const auto a = run_desk(cfg, work / "causal_a");
  const auto oracle = cmd_oracle(cfg, a.paths, false);
  cmd_episodes(cfg, a.paths, false, std::nullopt, std::nullopt);
  const auto final_rows = cmd_eval(cfg, a.paths, T, std::nullopt, std::nullopt);
  const auto start_rows = cmd_eval(cfg, a.paths, 0, EvalCondition::GenSame, std::nullopt);
  auto acc = [&](EvalCondition c) -> std::optional<EvalResult> {
    for (const auto& r : final_rows) {
      if (r.condition == c) return r.result;
    }
    return std::nullopt;
  };
  const auto mem = acc(EvalCondition::Mem), ind = acc(EvalCondition::Ind), gs = acc(EvalCondition::GenSame);
  const auto om = oracle.acc[0], oi = oracle.acc[1];
  bool learn_ok = mem && ind && gs && om && oi && !start_rows.empty();
  std::string detail;
  if (learn_ok) {
    const auto& s0 = start_rows.front().result;
    const double band = s0.accuracy + kChanceSigmas * std::sqrt(s0.accuracy * (1 - s0.accuracy) / s0.n);
    const bool mem_ok = mem->accuracy >= kCeilingFraction * *om;
    const bool ind_ok = ind->accuracy >= kCeilingFraction * *oi;
    const bool gs_ok = gs->accuracy > band;
    learn_ok = mem_ok && ind_ok && gs_ok && a.train_seconds <= 7200;
    detail = "mem " + str(mem->accuracy) + " vs " + str(kCeilingFraction * *om) + " (oracle " + str(*om) +
             "), ind " + str(ind->accuracy) + " vs " + str(kCeilingFraction * *oi) + " (oracle " + str(*oi) +
             "), gensame " + str(gs->accuracy) + " vs chance band " + str(band) + " (step-0 " +
             str(s0.accuracy) + "), training " + str(a.train_seconds) + " s";
  } else {
    detail = "a condition or its oracle ceiling is unavailable";
  }
  report("desk-scale learning", learn_ok, detail);

  // Analysis over the causal checkpoints; also the Phase-1 direction.
  const auto causal = cmd_analyze(cfg, a.paths, false);
  const auto scores = specialization_scores(a.paths.specialization());
  specialization_anchors(&scores);
  bool csvs = true;
  for (const auto& p : {a.paths.metrics(), a.paths.specialization(), a.paths.pca(), a.paths.clusters()}) {
    csvs &= fs::exists(p) && fs::file_size(p) > 0;
  }
  std::cout << "  desk run produced metrics, specialization, pca and clusters CSVs: " << (csvs ? "yes" : "no")
            << std::endl;

  RunConfig masked_cfg = cfg;
  masked_cfg.run_id = cfg.run_id + "-masked";
  masked_cfg.model.mode = Objective::Masked;
  const auto mrun = run_desk(masked_cfg, work / "masked", quarter);
  const auto masked = cmd_analyze(masked_cfg, mrun.paths, false);
  const double c0 = score_at(causal, 0), cq = score_at(causal, static_cast<std::int64_t>(quarter));
  const double m0 = score_at(masked, 0), mq = score_at(masked, static_cast<std::int64_t>(quarter));
  report("phase-1 specialization rise", cq > c0 && mq > m0,
         "causal " + str(c0) + " -> " + str(cq) + ", masked " + str(m0) + " -> " + str(mq) + " at step " +
             std::to_string(quarter));

  // Reproducibility.
  const auto b = run_desk(cfg, work / "causal_b");
  const auto ha = fnv1a(read_text_file(a.paths.metrics()));
  const auto hb = fnv1a(read_text_file(b.paths.metrics()));
  report("reproducibility", ha == hb, "metrics.csv fnv1a " + ha + " vs " + hb);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rhm acceptance checks"};
  fs::path config = RHM_DESK_CONFIG;
  fs::path work = fs::temp_directory_path() / "rhm_acceptance";
  bool skip_desk = false;
  bool keep = false;
  app.add_option("--config", config, "Desk-scale run config");
  app.add_option("--work", work, "Scratch directory for the desk runs");
  app.add_flag("--skip-desk", skip_desk, "Leave out the training-based criteria");
  app.add_flag("--keep", keep, "Keep the desk run directories");
  CLI11_PARSE(app, argc, argv);

  try {
    grammar_soundness();
    sequence_counting();
    zipf_fidelity();
    gradient_correctness();
    schedule_anchors();
    adamw_oracle();
    causality();
    oracle_equivalence();
    if (skip_desk) {
      specialization_anchors(nullptr);
      for (const char* n : {"desk-scale learning", "phase-1 specialization rise", "reproducibility"}) skip(n);
    } else {
      desk_criteria(config, work);
      if (!keep) fs::remove_all(work);
    }
  } catch (const std::exception& e) {
    std::cout << "FAIL acceptance aborted: " << e.what() << std::endl;
    return 1;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}

#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "doctest.h"
#include "rhm/config.hpp"
#include "rhm/error.hpp"
#include "rhm/io.hpp"
#include "rhm/pipeline.hpp"

using namespace rhm;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
  return run_config_from_json(nlohmann::json::parse(R"({
    "run_id": "tiny",
    "grammar": {"v": 4, "m": 2, "s": 2, "L": 2, "seed": 3},
    "split": {"holdout_combo_fraction": 0.25, "seed": 3,
              "transfer_dists": [{"kind": "zipf", "exponent": 2}, {"kind": "zipf", "exponent": 2}]},
    "model": {"depth": 2, "heads": 2, "d_embed": 16},
    "train": {"batch": 8, "n_ct": 2, "total_steps": 20, "checkpoint_every": 10, "eval_every": 10,
              "eval_episodes": 64, "spec_episodes": 16, "seed": 3},
    "analysis": {"episodes": 8}
  })"));
}

struct TempRun {
  RunPaths paths;
  TempRun() {
    static int counter = 0;
    paths.root = fs::temp_directory_path() /
                 ("rhm_pipeline_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(paths.root);
  }
  ~TempRun() { fs::remove_all(paths.root); }
};

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("gen-grammar is reproducible and guarded") {
    TempRun run;
    const auto cfg = tiny_config();
    cmd_gen_grammar(cfg, run.paths, false);
    const auto first = read_text_file(run.paths.grammar());
    CHECK_THROWS_AS(cmd_gen_grammar(cfg, run.paths, false), ParameterError);
    cmd_gen_grammar(cfg, run.paths, true);
    CHECK(read_text_file(run.paths.grammar()) == first);

    const Grammar g = load_grammar_file(run.paths.grammar());
    CHECK(g == sample_grammar(cfg.grammar));
    Philox a(1, Stream::Derivation), b(1, Stream::Derivation);
    CHECK(derive(g, 1, a) == derive(sample_grammar(cfg.grammar), 1, b));
    CHECK(load_run_config(run.paths.config()) == cfg);
  }

  TEST_CASE("a run directory refuses a different config") {
    TempRun run;
    auto cfg = tiny_config();
    cmd_gen_grammar(cfg, run.paths, false);
    auto other = cfg;
    other.train.eta = 1e-3;
    CHECK_THROWS_AS(claim_run_dir(other, run.paths, false), ConfigError);
    CHECK_NOTHROW(claim_run_dir(other, run.paths, true));
    auto regrown = cfg;
    regrown.grammar.seed = 4;
    CHECK_THROWS_AS(load_experiment(regrown, run.paths), ConfigError);
  }

  TEST_CASE("invalid grammar settings fail before anything is written") {
    TempRun run;
    auto cfg = tiny_config();
    cfg.grammar.m = 5;  // m*v > v^s
    CHECK_THROWS_AS(cmd_gen_grammar(cfg, run.paths, false), ParameterError);
    CHECK_FALSE(fs::exists(run.paths.grammar()));
  }

  TEST_CASE("full pipeline on a tiny run") {
    TempRun run;
    const auto cfg = tiny_config();
    const auto& p = run.paths;
    CHECK_THROWS_AS(load_experiment(cfg, p), MissingArtifactError);
    cmd_gen_grammar(cfg, p, false);
    cmd_gen_data(cfg, p, false);
    const Grammar g = load_grammar_file(p.grammar());
    for (const char* name : {"train", "heldout", "withheld", "gensame", "transfer"}) {
      std::ifstream in(p.dataset(name));
      REQUIRE(in);
      CHECK_NOTHROW(read_dataset(in, &g));
    }
    cmd_episodes(cfg, p, false, std::nullopt, std::nullopt);
    std::ifstream ep(p.episodes(EvalCondition::Mem));
    CHECK(read_episodes(ep).size() == cfg.train.eval_episodes);

    const auto summary = cmd_train(cfg, p, false);
    CHECK(list_checkpoints(p) == std::vector<std::uint64_t>{0, 10, 20});
    CHECK(summary.checkpoint_steps == list_checkpoints(p));
    const auto metrics = read_text_file(p.metrics());
    CHECK(line_count(p.metrics()) == 22);
    cmd_train(cfg, p, true);
    CHECK(read_text_file(p.metrics()) == metrics);

    try {
      cmd_eval(cfg, p, 15, std::nullopt, std::nullopt);
      FAIL("expected MissingArtifactError");
    } catch (const MissingArtifactError& e) {
      CHECK(std::string(e.what()).find(p.checkpoint(15).string()) != std::string::npos);
    }
    const auto rows0 = cmd_eval(cfg, p, 20, EvalCondition::Mem, 0u);
    const auto rows2 = cmd_eval(cfg, p, 20, EvalCondition::Mem, 2u);
    CHECK(rows0.size() == 1);
    CHECK(rows0[0].n_ct == 0);
    CHECK(rows2[0].n_ct == 2);
    const auto all = cmd_eval(cfg, p, 20, std::nullopt, std::nullopt);
    CHECK(all.size() == 4);
    CHECK(line_count(p.eval()) == 1 + 1 + 1 + 4);
    CHECK(read_text_file(p.eval()).rfind(std::string(kEvalHeader) + "\n", 0) == 0);

    const auto a = cmd_analyze(cfg, p, false);
    // k checkpoints x layers x heads x conditions.
    CHECK(a.specialization_rows == 3 * 2 * 2 * 4);
    CHECK(line_count(p.specialization()) == 1 + a.specialization_rows);
    CHECK(a.cluster_rows == 3 * 2 * 2);
    CHECK(line_count(p.clusters()) == 1 + a.cluster_rows);
    CHECK(a.pca_rows == 3 * 2 * 16);
    CHECK(line_count(p.pca()) == 1 + a.pca_rows);
    CHECK(a.curve.size() == 3);
    CHECK_THROWS_AS(cmd_analyze(cfg, p, false), ParameterError);
    const auto spec_csv = read_text_file(p.specialization());
    cmd_analyze(cfg, p, true);
    CHECK(read_text_file(p.specialization()) == spec_csv);

    const auto o = cmd_oracle(cfg, p, false, 256);
    for (const auto& acc : o.acc) {
      REQUIRE(acc.has_value());
      CHECK(*acc >= 0.0);
      CHECK(*acc <= 1.0);
    }
    const auto oracle_csv = read_text_file(p.oracle());
    CHECK(oracle_csv.rfind(std::string(kMetricsHeader) + "\n-1,,,", 0) == 0);
  }

  TEST_CASE("analysis without checkpoints reports the missing artifact") {
    TempRun run;
    const auto cfg = tiny_config();
    cmd_gen_grammar(cfg, run.paths, false);
    CHECK_THROWS_AS(cmd_analyze(cfg, run.paths, false), MissingArtifactError);
  }
}

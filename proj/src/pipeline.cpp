#include "rhm/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include "rhm/analysis.hpp"
#include "rhm/checkpoint.hpp"
#include "rhm/error.hpp"
#include "rhm/io.hpp"
#include "rhm/oracle.hpp"

namespace rhm {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kChunk = 256;

std::size_t condition_index(EvalCondition c) {
  return static_cast<std::size_t>(std::find(kAllConditions.begin(), kAllConditions.end(), c) -
                                  kAllConditions.begin());
}

template <class F>
std::string render(F&& f) {
  std::ostringstream os;
  f(os);
  return os.str();
}

}  // namespace

fs::path RunPaths::checkpoint(std::uint64_t step) const {
  return checkpoints() / checkpoint_filename(step);
}

void claim_run_dir(const RunConfig& cfg, const RunPaths& paths, bool force) {
  const std::string text = dump_run_config(cfg);
  if (fs::exists(paths.config())) {
    if (read_text_file(paths.config()) == text) return;
    if (!force) {
      throw ConfigError(paths.root.string() +
                        " already holds a run with a different config (use --force to replace it)");
    }
  }
  write_text_file(paths.config(), text, true);
}

Grammar load_grammar_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("missing grammar file: " + path.string());
  return read_grammar(in);
}

Experiment load_experiment(const RunConfig& cfg, const RunPaths& paths) {
  Grammar g = load_grammar_file(paths.grammar());
  if (!(g.params() == cfg.grammar)) {
    throw ConfigError(paths.grammar().string() + " was generated from different grammar settings");
  }
  return build_experiment(g, cfg.split, cfg.task, cfg.model);
}

void cmd_gen_grammar(const RunConfig& cfg, const RunPaths& paths, bool force) {
  cfg.grammar.validate();
  const Grammar g = sample_grammar(cfg.grammar);
  if (!force && fs::exists(paths.grammar())) {
    throw ParameterError(paths.grammar().string() + " already exists (use --force to overwrite)");
  }
  claim_run_dir(cfg, paths, force);
  write_text_file(paths.grammar(), render([&](std::ostream& os) { write_grammar(os, g); }), true);
}

void cmd_gen_data(const RunConfig& cfg, const RunPaths& paths, bool force) {
  claim_run_dir(cfg, paths, force);
  const Experiment exp = load_experiment(cfg, paths);
  const std::pair<const char*, const SequenceSet*> sets[] = {
      {"train", &exp.splits.train},     {"heldout", &exp.splits.heldout},
      {"withheld", &exp.splits.withheld}, {"gensame", &exp.gensame},
      {"transfer", &exp.transfer},
  };
  for (const auto& [name, set] : sets) {
    write_text_file(paths.dataset(name), render([&](std::ostream& os) { write_dataset(os, *set); }),
                    force);
  }
}

void cmd_episodes(const RunConfig& cfg, const RunPaths& paths, bool force,
                  std::optional<EvalCondition> condition, std::optional<std::uint32_t> n_ct) {
  claim_run_dir(cfg, paths, force);
  const Experiment exp = load_experiment(cfg, paths);
  for (auto c : kAllConditions) {
    if (condition && *condition != c) continue;
    if (!exp.available(c)) {
      if (condition) throw InfeasibleError("condition '" + std::string(to_string(c)) + "' has no sequences");
      continue;
    }
    Philox rng(cfg.train.seed, Stream::Eval, condition_index(c));
    const auto streams = make_streams(exp, c, n_ct.value_or(cfg.train.n_ct), cfg.train.eval_episodes, rng);
    std::vector<EpisodeRecord> records;
    records.reserve(streams.size());
    for (const auto& s : streams) records.push_back(to_record(s, c));
    write_text_file(paths.episodes(c), render([&](std::ostream& os) { write_episodes(os, records); }),
                    force);
  }
}

TrainSummary cmd_train(const RunConfig& cfg, const RunPaths& paths, bool force,
                       const TrainOptions& options) {
  claim_run_dir(cfg, paths, force);
  const Experiment exp = load_experiment(cfg, paths);
  if (!force && fs::exists(paths.metrics())) {
    throw ParameterError(paths.metrics().string() + " already exists (use --force to overwrite)");
  }
  if (fs::exists(paths.checkpoints())) fs::remove_all(paths.checkpoints());
  fs::create_directories(paths.root);

  std::ofstream metrics(paths.metrics(), std::ios::binary | std::ios::trunc);
  if (!metrics) throw Error("cannot open " + paths.metrics().string() + " for writing");
  const CheckpointMeta meta{cfg.run_id, cfg.train.seed};

  TrainHooks hooks;
  hooks.metrics = &metrics;
  hooks.stop_at = options.stop_at;
  hooks.checkpoint = [&](const ModelState& s) { save_checkpoint(paths.checkpoint(s.step), s, meta); };
  if (!options.quiet) {
    hooks.on_eval = [](const MetricsRow& r) {
      std::cerr << format_metrics_row(static_cast<std::int64_t>(r.step), r) << std::endl;
    };
  }
  return train(exp, cfg.model, cfg.train, hooks);
}

std::vector<EvalRow> cmd_eval(const RunConfig& cfg, const RunPaths& paths, std::uint64_t step,
                              std::optional<EvalCondition> condition,
                              std::optional<std::uint32_t> n_ct) {
  const ModelState state = load_checkpoint(paths.checkpoint(step));
  if (!(state.config == cfg.model)) {
    throw ConfigError(paths.checkpoint(step).string() + " was written with a different model config");
  }
  const Experiment exp = load_experiment(cfg, paths);
  const std::uint32_t k = n_ct.value_or(cfg.train.n_ct);
  std::vector<EvalRow> rows;
  for (auto c : kAllConditions) {
    if (condition && *condition != c) continue;
    if (!exp.available(c)) {
      if (condition) throw InfeasibleError("condition '" + std::string(to_string(c)) + "' has no sequences");
      continue;
    }
    Philox rng(cfg.train.seed, Stream::Eval, condition_index(c));
    rows.push_back({step, c, k, evaluate(state.params, state.config, exp, c, k, cfg.train.eval_episodes, rng)});
  }
  const bool fresh = !fs::exists(paths.eval());
  std::ofstream out(paths.eval(), std::ios::binary | std::ios::app);
  if (!out) throw Error("cannot open " + paths.eval().string() + " for writing");
  if (fresh) out << kEvalHeader << '\n';
  for (const auto& r : rows) {
    out << r.step << ',' << to_string(r.condition) << ',' << r.n_ct << ','
        << format_double(r.result.accuracy) << ',' << format_double(r.result.ci_low) << ','
        << format_double(r.result.ci_high) << ',' << r.result.n << '\n';
  }
  return rows;
}

std::vector<std::uint64_t> list_checkpoints(const RunPaths& paths) {
  std::vector<std::uint64_t> steps;
  if (!fs::is_directory(paths.checkpoints())) return steps;
  for (const auto& e : fs::directory_iterator(paths.checkpoints())) {
    const std::string name = e.path().filename().string();
    if (name.size() != 18 || name.rfind("ckpt_", 0) != 0 || name.substr(14) != ".bin") continue;
    try {
      steps.push_back(std::stoull(name.substr(5, 9)));
    } catch (const std::exception&) {
    }
  }
  std::sort(steps.begin(), steps.end());
  return steps;
}

AnalysisSummary cmd_analyze(const RunConfig& cfg, const RunPaths& paths, bool force) {
  const auto steps = list_checkpoints(paths);
  if (steps.empty()) throw MissingArtifactError("no checkpoints in " + paths.checkpoints().string());
  for (const auto& p : {paths.specialization(), paths.pca(), paths.clusters()}) {
    if (!force && fs::exists(p)) {
      throw ParameterError(p.string() + " already exists (use --force to overwrite)");
    }
  }
  const Experiment exp = load_experiment(cfg, paths);
  const auto& gp = exp.grammar.params();
  const std::uint32_t n_ct = cfg.analysis.n_ct ? cfg.analysis.n_ct : cfg.train.n_ct;
  const bool causal = cfg.model.mode == Objective::Causal;
  const std::size_t region = query_region_length(cfg.model.mode, gp.length());
  const auto grouping = RelationGrouping::build(gp.s, gp.L, region, causal);

  AnalysisSummary summary;
  std::vector<std::vector<TokenStream>> streams;
  for (auto c : cfg.analysis.conditions) {
    if (!exp.available(c)) continue;
    Philox rng(cfg.train.seed, Stream::Analysis, 1 + condition_index(c));
    streams.push_back(make_streams(exp, c, n_ct, cfg.analysis.episodes, rng));
    summary.conditions.push_back(c);
  }
  if (summary.conditions.empty()) throw InfeasibleError("analyze: no analyzed condition has sequences");

  std::vector<SpecializationRecord> spec_rows;
  std::vector<PcaRow> pca_rows;
  std::vector<ClusterRow> cluster_rows;
  std::vector<double> overall;

  for (auto step : steps) {
    const ModelState state = load_checkpoint(paths.checkpoint(step));
    if (!(state.config == cfg.model)) {
      throw ConfigError(paths.checkpoint(step).string() + " was written with a different model config");
    }
    const auto depth = state.config.depth;
    const auto D = static_cast<Eigen::Index>(state.config.d_embed);
    std::vector<EpisodeAttention> pooled;
    std::vector<std::vector<Eigen::RowVectorXd>> hidden(depth);
    double step_overall = 0.0;

    for (std::size_t ci = 0; ci < summary.conditions.size(); ++ci) {
      const auto& batch = streams[ci];
      std::vector<EpisodeAttention> maps;
      for (std::size_t b = 0; b < batch.size(); b += kChunk) {
        const std::span<const TokenStream> chunk(batch.data() + b, std::min(kChunk, batch.size() - b));
        const auto trace = forward(state.params, chunk, state.config);
        for (std::size_t e = 0; e < chunk.size(); ++e) {
          maps.push_back(extract_query_attention(trace, e, chunk[e], region));
          for (std::uint32_t l = 0; l < depth; ++l) {
            const auto& res = trace.residual(l);
            for (std::size_t p = 0; p < region; ++p) {
              const auto row = static_cast<Eigen::Index>(trace.row(e, chunk[e].query_offset + p));
              hidden[l].push_back(res.row(row).template cast<double>());
            }
          }
        }
      }
      const auto ls = layer_specialization(maps, grouping, cfg.analysis.aggregation,
                                           static_cast<std::int64_t>(step), summary.conditions[ci]);
      spec_rows.insert(spec_rows.end(), ls.heads.begin(), ls.heads.end());
      step_overall += ls.overall;
      pooled.insert(pooled.end(), maps.begin(), maps.end());
    }
    overall.push_back(step_overall / static_cast<double>(summary.conditions.size()));

    for (std::uint32_t l = 0; l < depth; ++l) {
      Eigen::MatrixXd h(static_cast<Eigen::Index>(hidden[l].size()), D);
      for (std::size_t r = 0; r < hidden[l].size(); ++r) h.row(static_cast<Eigen::Index>(r)) = hidden[l][r];
      try {
        const auto result = pca(h);
        for (std::size_t c = 0; c < result.ratios.size(); ++c) {
          pca_rows.push_back({static_cast<std::int64_t>(step), l, static_cast<std::uint32_t>(c), result.ratios[c]});
        }
      } catch (const DegenerateError&) {
        // Constant hidden states have no spectrum; the layer contributes no rows.
      }
    }

    const auto avg = average_head_maps(pooled);
    const auto clusters = cluster_heads(avg, cfg.analysis.cluster_threshold, causal);
    const std::uint32_t heads = state.config.heads;
    for (std::size_t i = 0; i < clusters.assignment.size(); ++i) {
      cluster_rows.push_back({static_cast<std::int64_t>(step), static_cast<std::uint32_t>(i / heads),
                              static_cast<std::uint32_t>(i % heads), clusters.assignment[i]});
    }
  }

  if (steps.size() >= 2) {
    std::vector<std::int64_t> s(steps.begin(), steps.end());
    std::size_t i = 0;
    summary.curve = specialization_curve(s, [&](std::int64_t) { return overall[i++]; });
  } else {
    summary.curve.push_back({static_cast<std::int64_t>(steps.front()), overall.front()});
  }

  write_text_file(paths.specialization(),
                  render([&](std::ostream& os) { write_specialization_csv(os, spec_rows); }), true);
  write_text_file(paths.pca(), render([&](std::ostream& os) { write_pca_csv(os, pca_rows); }), true);
  write_text_file(paths.clusters(), render([&](std::ostream& os) { write_clusters_csv(os, cluster_rows); }),
                  true);
  summary.checkpoints = steps.size();
  summary.specialization_rows = spec_rows.size();
  summary.pca_rows = pca_rows.size();
  summary.cluster_rows = cluster_rows.size();
  return summary;
}

OracleCeilings cmd_oracle(const RunConfig& cfg, const RunPaths& paths, bool force, std::size_t samples) {
  claim_run_dir(cfg, paths, force);
  if (!force && fs::exists(paths.oracle())) {
    throw ParameterError(paths.oracle().string() + " already exists (use --force to overwrite)");
  }
  const Experiment exp = load_experiment(cfg, paths);
  OracleCeilings out;
  MetricsRow row;
  for (std::size_t c = 0; c < kAllConditions.size(); ++c) {
    const auto cond = kAllConditions[c];
    if (!exp.available(cond)) continue;
    Philox rng(cfg.train.seed, Stream::Oracle, c);
    const auto dists = exp.dists(cond);
    out.acc[c] = oracle_accuracy(exp.grammar, exp.queries(cond), dists, samples, rng);
    row.acc[c] = out.acc[c];
  }
  write_text_file(paths.oracle(),
                  std::string(kMetricsHeader) + "\n" + format_metrics_row(-1, row) + "\n", true);
  return out;
}

}  // namespace rhm

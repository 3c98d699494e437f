#include "rhm/config.hpp"

#include <fstream>
#include <set>

#include "rhm/error.hpp"
#include "rhm/io.hpp"

namespace rhm {

using nlohmann::json;

namespace {

// Reads fields out of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
  }

  bool has(const std::string& key) {
    known_.insert(key);
    return j_.contains(key);
  }

  template <class T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: " + name_ + "." + key + ": " + e.what());
    }
  }

  const json& at(const std::string& key) {
    known_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!known_.count(key)) throw ConfigError("config: unknown key '" + name_ + "." + key + "'");
    }
  }

  const std::string& name() const { return name_; }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> known_;
};

template <class E, class Parse>
E get_enum(Section& sec, const std::string& key, E fallback, Parse parse) {
  if (!sec.has(key)) return fallback;
  const json& v = sec.at(key);
  if (!v.is_string()) throw ConfigError("config: " + sec.name() + "." + key + " must be a string");
  try {
    return parse(v.get<std::string>());
  } catch (const ParameterError& e) {
    throw ConfigError("config: " + sec.name() + "." + key + ": " + e.what());
  }
}

std::vector<RuleDistribution> dists_from_json(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError("config: " + where + " must be an array");
  std::vector<RuleDistribution> out;
  for (const auto& d : j) out.push_back(rule_distribution_from_json(d));
  return out;
}

json dists_to_json(const std::vector<RuleDistribution>& ds) {
  json a = json::array();
  for (const auto& d : ds) a.push_back(to_json(d));
  return a;
}

Aggregation parse_aggregation(const std::string& s) {
  if (s == "mean") return Aggregation::Mean;
  if (s == "max") return Aggregation::Max;
  throw ParameterError("unknown aggregation '" + s + "'");
}

}  // namespace

json to_json(const RuleDistribution& d) {
  if (d.kind == RuleDistribution::Kind::Uniform) return json{{"kind", "uniform"}};
  return json{{"kind", "zipf"}, {"exponent", d.exponent}};
}

RuleDistribution rule_distribution_from_json(const json& j) {
  Section sec(j, "distribution");
  std::string kind = "uniform";
  double exponent = 0.0;
  sec.get("kind", kind);
  sec.get("exponent", exponent);
  sec.finish();
  if (kind == "uniform") {
    if (j.contains("exponent")) throw ConfigError("config: uniform distribution takes no exponent");
    return RuleDistribution::uniform();
  }
  if (kind == "zipf") return RuleDistribution::zipf(exponent);
  throw ConfigError("config: unknown distribution kind '" + kind + "'");
}

json to_json(const ModelConfig& c) {
  return json{{"depth", c.depth},           {"heads", c.heads},
              {"d_embed", c.d_embed},       {"widen", c.widen},
              {"theta", c.theta},           {"vocab", c.vocab},
              {"mode", to_string(c.mode)},  {"root_head", c.root_head},
              {"root_classes", c.root_classes}, {"ln_eps", c.ln_eps}};
}

ModelConfig model_config_from_json(const json& j) {
  Section sec(j, "model");
  ModelConfig c;
  sec.get("depth", c.depth);
  sec.get("heads", c.heads);
  sec.get("d_embed", c.d_embed);
  sec.get("widen", c.widen);
  sec.get("theta", c.theta);
  sec.get("vocab", c.vocab);
  c.mode = get_enum(sec, "mode", c.mode, [](const std::string& s) { return parse_objective(s); });
  sec.get("root_head", c.root_head);
  sec.get("root_classes", c.root_classes);
  sec.get("ln_eps", c.ln_eps);
  sec.finish();
  return c;
}

void RunConfig::validate() const {
  grammar.validate();
  model.validate();
  train.validate();
  if (model.vocab < grammar.v + 3) {
    throw ParameterError("model.vocab must be at least grammar.v + 3");
  }
  if (model.root_head && model.root_classes != grammar.v) {
    throw ParameterError("model.root_classes must equal grammar.v");
  }
  if (!(split.train_fraction > 0 && split.train_fraction <= 1)) {
    throw ParameterError("split.train_fraction must lie in (0, 1]");
  }
  if (!split.transfer_dists.empty() && split.transfer_dists.size() != grammar.L) {
    throw ParameterError("split.transfer_dists needs one entry per level");
  }
  if (analysis.episodes < 1) throw ParameterError("analysis.episodes must be >= 1");
  if (analysis.conditions.empty()) throw ParameterError("analysis.conditions must not be empty");
}

void RunConfig::set_seed(std::uint64_t seed) {
  grammar.seed = seed;
  split.seed = seed;
  train.seed = seed;
}

RunConfig run_config_from_json(const json& j) {
  Section top(j, "config");
  RunConfig cfg;
  top.get("run_id", cfg.run_id);

  if (top.has("grammar")) {
    Section sec(top.at("grammar"), "grammar");
    sec.get("v", cfg.grammar.v);
    sec.get("m", cfg.grammar.m);
    sec.get("s", cfg.grammar.s);
    sec.get("L", cfg.grammar.L);
    sec.get("seed", cfg.grammar.seed);
    if (sec.has("layer_dists")) {
      cfg.grammar.layer_dists = dists_from_json(sec.at("layer_dists"), "grammar.layer_dists");
    }
    sec.finish();
  }
  if (cfg.grammar.layer_dists.empty()) {
    cfg.grammar.layer_dists.assign(cfg.grammar.L, RuleDistribution::uniform());
  }

  if (top.has("split")) {
    Section sec(top.at("split"), "split");
    sec.get("train_fraction", cfg.split.train_fraction);
    sec.get("holdout_combo_level", cfg.split.holdout_combo_level);
    sec.get("holdout_combo_fraction", cfg.split.holdout_combo_fraction);
    if (sec.has("transfer_dists")) {
      cfg.split.transfer_dists = dists_from_json(sec.at("transfer_dists"), "split.transfer_dists");
    }
    sec.get("seed", cfg.split.seed);
    sec.get("sample_pool_size", cfg.split.sample_pool_size);
    sec.get("transfer_samples", cfg.split.transfer_samples);
    sec.get("gensame_samples", cfg.split.gensame_samples);
    sec.finish();
  }

  if (top.has("task")) {
    Section sec(top.at("task"), "task");
    sec.get("use_sep", cfg.task.use_sep);
    sec.get("contexts_from_condition", cfg.task.contexts_from_condition);
    sec.finish();
  }

  bool vocab_given = false;
  bool classes_given = false;
  if (top.has("model")) {
    const json& m = top.at("model");
    cfg.model = model_config_from_json(m);
    vocab_given = m.contains("vocab");
    classes_given = m.contains("root_classes");
  }
  if (!vocab_given) cfg.model.vocab = cfg.grammar.v + 3;
  if (!classes_given) cfg.model.root_classes = cfg.grammar.v;

  if (top.has("train")) {
    Section sec(top.at("train"), "train");
    auto& t = cfg.train;
    sec.get("eta", t.eta);
    sec.get("weight_decay", t.weight_decay);
    sec.get("beta1", t.beta1);
    sec.get("beta2", t.beta2);
    sec.get("eps", t.eps);
    sec.get("batch", t.batch);
    sec.get("n_ct", t.n_ct);
    sec.get("total_steps", t.total_steps);
    sec.get("warmup_frac", t.warmup_frac);
    sec.get("floor_frac", t.floor_frac);
    sec.get("start_frac", t.start_frac);
    sec.get("checkpoint_every", t.checkpoint_every);
    sec.get("seed", t.seed);
    sec.get("eval_every", t.eval_every);
    sec.get("eval_episodes", t.eval_episodes);
    sec.get("spec_episodes", t.spec_episodes);
    sec.get("grad_clip", t.grad_clip);
    sec.get("final_target_only", t.final_target_only);
    sec.get("mask_loss_weight", t.mask_loss_weight);
    sec.get("root_loss_weight", t.root_loss_weight);
    sec.get("aux_mask_prob", t.aux_mask_prob);
    sec.finish();
  }

  if (top.has("analysis")) {
    Section sec(top.at("analysis"), "analysis");
    auto& a = cfg.analysis;
    if (sec.has("conditions")) {
      const json& cs = sec.at("conditions");
      if (!cs.is_array()) throw ConfigError("config: analysis.conditions must be an array");
      a.conditions.clear();
      for (const auto& c : cs) {
        if (!c.is_string()) throw ConfigError("config: analysis.conditions entries must be strings");
        try {
          a.conditions.push_back(parse_condition(c.get<std::string>()));
        } catch (const ParameterError& e) {
          throw ConfigError(std::string("config: analysis.conditions: ") + e.what());
        }
      }
    }
    sec.get("episodes", a.episodes);
    sec.get("n_ct", a.n_ct);
    sec.get("cluster_threshold", a.cluster_threshold);
    a.aggregation = get_enum(sec, "aggregation", a.aggregation, parse_aggregation);
    sec.finish();
  }
  top.finish();
  // Well-formed but invalid settings surface as ParameterError.
  cfg.validate();
  return cfg;
}

json to_json(const RunConfig& cfg) {
  const auto& g = cfg.grammar;
  const auto& s = cfg.split;
  const auto& t = cfg.train;
  const auto& a = cfg.analysis;
  json conds = json::array();
  for (auto c : a.conditions) conds.push_back(std::string(to_string(c)));
  return json{
      {"run_id", cfg.run_id},
      {"grammar",
       {{"v", g.v}, {"m", g.m}, {"s", g.s}, {"L", g.L}, {"seed", g.seed},
        {"layer_dists", dists_to_json(g.layer_dists)}}},
      {"split",
       {{"train_fraction", s.train_fraction},
        {"holdout_combo_level", s.holdout_combo_level},
        {"holdout_combo_fraction", s.holdout_combo_fraction},
        {"transfer_dists", dists_to_json(s.transfer_dists)},
        {"seed", s.seed},
        {"sample_pool_size", s.sample_pool_size},
        {"transfer_samples", s.transfer_samples},
        {"gensame_samples", s.gensame_samples}}},
      {"task",
       {{"use_sep", cfg.task.use_sep}, {"contexts_from_condition", cfg.task.contexts_from_condition}}},
      {"model", to_json(cfg.model)},
      {"train",
       {{"eta", t.eta},
        {"weight_decay", t.weight_decay},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"eps", t.eps},
        {"batch", t.batch},
        {"n_ct", t.n_ct},
        {"total_steps", t.total_steps},
        {"warmup_frac", t.warmup_frac},
        {"floor_frac", t.floor_frac},
        {"start_frac", t.start_frac},
        {"checkpoint_every", t.checkpoint_every},
        {"seed", t.seed},
        {"eval_every", t.eval_every},
        {"eval_episodes", t.eval_episodes},
        {"spec_episodes", t.spec_episodes},
        {"grad_clip", t.grad_clip},
        {"final_target_only", t.final_target_only},
        {"mask_loss_weight", t.mask_loss_weight},
        {"root_loss_weight", t.root_loss_weight},
        {"aux_mask_prob", t.aux_mask_prob}}},
      {"analysis",
       {{"conditions", conds},
        {"episodes", a.episodes},
        {"n_ct", a.n_ct},
        {"cluster_threshold", a.cluster_threshold},
        {"aggregation", a.aggregation == Aggregation::Mean ? "mean" : "max"}}},
  };
}

RunConfig load_run_config(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::string dump_run_config(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

}  // namespace rhm

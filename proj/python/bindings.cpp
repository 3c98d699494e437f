#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "rhm/analysis.hpp"
#include "rhm/checkpoint.hpp"
#include "rhm/config.hpp"
#include "rhm/error.hpp"
#include "rhm/io.hpp"
#include "rhm/oracle.hpp"
#include "rhm/pipeline.hpp"

namespace py = pybind11;
using namespace rhm;

namespace {

std::vector<RuleDistribution> dists_or_empty(const std::optional<std::vector<RuleDistribution>>& d) {
  return d.value_or(std::vector<RuleDistribution>{});
}

RunConfig config_from_text(const std::string& text) {
  try {
    return run_config_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

// Loaded checkpoint with a forward pass over raw token ids.
struct Model {
  ModelState state;

  Eigen::MatrixXd logits(const std::vector<std::uint32_t>& ids) const {
    TokenStream s;
    s.ids = ids;
    s.target_position = ids.size();
    const std::vector<TokenStream> batch{s};
    return forward(state.params, std::span<const TokenStream>(batch), state.config).logits.cast<double>();
  }

  std::vector<Eigen::MatrixXd> attention(const std::vector<std::uint32_t>& ids) const {
    TokenStream s;
    s.ids = ids;
    s.target_position = ids.size();
    const std::vector<TokenStream> batch{s};
    const auto tr = forward(state.params, std::span<const TokenStream>(batch), state.config);
    std::vector<Eigen::MatrixXd> out;
    for (std::size_t l = 0; l < state.config.depth; ++l) {
      for (std::size_t h = 0; h < state.config.heads; ++h) out.push_back(tr.attention(l, 0, h).cast<double>());
    }
    return out;
  }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "RHM lab core: grammars, exact oracle, transformer training and analysis";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ParameterError>(m, "ParameterError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<InfeasibleError>(m, "InfeasibleError", base.ptr());
  py::register_exception<EncodingError>(m, "EncodingError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<RangeError>(m, "RangeError", base.ptr());
  py::register_exception<NonFiniteError>(m, "NonFiniteError", base.ptr());
  py::register_exception<InconsistentPrefixError>(m, "InconsistentPrefixError", base.ptr());
  py::register_exception<DegenerateError>(m, "DegenerateError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<MissingArtifactError>(m, "MissingArtifactError", base.ptr());

  py::class_<RuleDistribution>(m, "RuleDistribution")
      .def_static("uniform", &RuleDistribution::uniform)
      .def_static("zipf", &RuleDistribution::zipf, py::arg("exponent"))
      .def_property_readonly("kind", [](const RuleDistribution& d) {
        return d.kind == RuleDistribution::Kind::Uniform ? "uniform" : "zipf";
      })
      .def_readonly("exponent", &RuleDistribution::exponent)
      .def("__eq__", &RuleDistribution::operator==)
      .def("__repr__", [](const RuleDistribution& d) { return to_string(d); });

  m.def("zipf_probs", &zipf_probs, py::arg("m"), py::arg("a"));

  py::class_<GrammarParams>(m, "GrammarParams")
      .def(py::init(&GrammarParams::make), py::arg("v"), py::arg("m"), py::arg("s"), py::arg("L"),
           py::arg("seed") = 0)
      .def_readwrite("v", &GrammarParams::v)
      .def_readwrite("m", &GrammarParams::m)
      .def_readwrite("s", &GrammarParams::s)
      .def_readwrite("L", &GrammarParams::L)
      .def_readwrite("seed", &GrammarParams::seed)
      .def_readwrite("layer_dists", &GrammarParams::layer_dists)
      .def("validate", &GrammarParams::validate)
      .def_property_readonly("length", &GrammarParams::length);

  py::class_<Grammar>(m, "Grammar")
      .def_property_readonly("params", &Grammar::params)
      .def("production",
           [](const Grammar& g, std::uint32_t level, Symbol sym, std::uint32_t rule) {
             auto p = g.production(level, sym, rule);
             return std::vector<Symbol>(p.begin(), p.end());
           })
      .def("dumps",
           [](const Grammar& g) {
             std::ostringstream os;
             write_grammar(os, g);
             return os.str();
           })
      .def_static("loads",
                  [](const std::string& text) {
                    std::istringstream is(text);
                    return read_grammar(is);
                  })
      .def("__eq__", &Grammar::operator==);

  m.def("sample_grammar", &sample_grammar, py::arg("params"));

  py::class_<DerivationTree>(m, "DerivationTree")
      .def_readonly("root", &DerivationTree::root)
      .def_readonly("rules", &DerivationTree::rules)
      .def_readonly("leaves", &DerivationTree::leaves);

  m.def(
      "derive",
      [](const Grammar& g, Symbol root, std::uint64_t seed, std::uint64_t substream) {
        Philox rng(seed, Stream::Derivation, substream);
        return derive(g, root, rng);
      },
      py::arg("grammar"), py::arg("root"), py::arg("seed"), py::arg("substream") = 0);
  m.def("expand", [](const Grammar& g, Symbol root, const std::vector<std::uint32_t>& rules) {
    return expand(g, root, rules);
  });
  m.def("parse", [](const Grammar& g, const std::vector<Symbol>& tokens) { return parse(g, tokens); });
  m.def("count_sequences", [](const Grammar& g, Symbol root) {
    const auto c = count_sequences(g, root);
    return py::make_tuple(c.overflow ? py::object(py::none()) : py::int_(c.count), c.log_count);
  });

  py::class_<PosteriorResult>(m, "PosteriorResult")
      .def_readonly("probs", &PosteriorResult::probs)
      .def_readonly("support_count", &PosteriorResult::support_count)
      .def_readonly("argmax", &PosteriorResult::argmax);
  m.def(
      "posterior_next_token",
      [](const Grammar& g, const std::vector<Symbol>& prefix,
         const std::optional<std::vector<RuleDistribution>>& dists) {
        const auto d = dists_or_empty(dists);
        return posterior_next_token(g, prefix, d);
      },
      py::arg("grammar"), py::arg("prefix"), py::arg("layer_dists") = py::none());

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("eta", &TrainConfig::eta)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("beta1", &TrainConfig::beta1)
      .def_readwrite("beta2", &TrainConfig::beta2)
      .def_readwrite("eps", &TrainConfig::eps)
      .def_readwrite("batch", &TrainConfig::batch)
      .def_readwrite("n_ct", &TrainConfig::n_ct)
      .def_readwrite("total_steps", &TrainConfig::total_steps)
      .def_readwrite("warmup_frac", &TrainConfig::warmup_frac)
      .def_readwrite("floor_frac", &TrainConfig::floor_frac)
      .def_readwrite("start_frac", &TrainConfig::start_frac)
      .def_readwrite("checkpoint_every", &TrainConfig::checkpoint_every)
      .def_readwrite("seed", &TrainConfig::seed);
  m.def("lr_at", &lr_at, py::arg("step"), py::arg("config"));
  m.def(
      "adamw_update",
      [](std::vector<double> p, const std::vector<double>& g, std::vector<double> mom,
         std::vector<double> vel, std::uint64_t t, double lr, const TrainConfig& cfg, bool decay) {
        adamw_update<double>(p, g, mom, vel, t, lr, cfg, decay);
        return py::make_tuple(p, mom, vel);
      },
      py::arg("param"), py::arg("grad"), py::arg("m"), py::arg("v"), py::arg("t"), py::arg("lr"),
      py::arg("config"), py::arg("decay") = true);

  m.def("lca_height", &lca_height);
  m.def(
      "specialization_score",
      [](const Eigen::MatrixXd& attn, std::uint32_t s, std::uint32_t L, bool causal) {
        return specialization_score(
            attn, RelationGrouping::build(s, L, static_cast<std::size_t>(attn.rows()), causal));
      },
      py::arg("attn"), py::arg("s"), py::arg("L"), py::arg("causal") = false);
  m.def("pca_ratios", [](const Eigen::MatrixXd& h) { return pca(h).ratios; });
  m.def(
      "cluster_heads",
      [](const std::vector<Eigen::MatrixXd>& maps, double threshold, bool lower) {
        return cluster_heads(maps, threshold, lower).assignment;
      },
      py::arg("maps"), py::arg("threshold"), py::arg("lower_triangle") = false);

  py::class_<RunConfig>(m, "RunConfig")
      .def_static("loads", &config_from_text)
      .def_static("load", [](const std::filesystem::path& p) { return load_run_config(p); })
      .def("dumps", &dump_run_config)
      .def("set_seed", &RunConfig::set_seed)
      .def_readwrite("run_id", &RunConfig::run_id)
      .def_readwrite("train", &RunConfig::train)
      .def("__eq__", &RunConfig::operator==);

  py::class_<Model>(m, "Model")
      .def_static("load", [](const std::filesystem::path& p) { return Model{load_checkpoint(p)}; })
      .def_property_readonly("step", [](const Model& x) { return x.state.step; })
      .def("logits", &Model::logits, py::arg("ids"))
      .def("attention", &Model::attention, py::arg("ids"));

  auto paths = [](const std::filesystem::path& p) { return RunPaths{p}; };
  m.def("gen_grammar", [paths](const RunConfig& c, const std::filesystem::path& out, bool force) {
    cmd_gen_grammar(c, paths(out), force);
  }, py::arg("config"), py::arg("out"), py::arg("force") = false);
  m.def("gen_data", [paths](const RunConfig& c, const std::filesystem::path& out, bool force) {
    cmd_gen_data(c, paths(out), force);
  }, py::arg("config"), py::arg("out"), py::arg("force") = false);
  m.def(
      "train",
      [paths](const RunConfig& c, const std::filesystem::path& out, bool force,
              std::optional<std::uint64_t> stop_at) {
        TrainOptions opts;
        opts.stop_at = stop_at;
        py::gil_scoped_release release;
        return cmd_train(c, paths(out), force, opts).checkpoint_steps;
      },
      py::arg("config"), py::arg("out"), py::arg("force") = false, py::arg("stop_at") = py::none());
  m.def(
      "evaluate",
      [paths](const RunConfig& c, const std::filesystem::path& out, std::uint64_t step,
              std::optional<std::string> condition) {
        std::optional<EvalCondition> cond;
        if (condition) cond = parse_condition(*condition);
        py::dict result;
        for (const auto& r : cmd_eval(c, paths(out), step, cond, std::nullopt)) {
          result[py::str(std::string(to_string(r.condition)))] =
              py::make_tuple(r.result.accuracy, r.result.ci_low, r.result.ci_high);
        }
        return result;
      },
      py::arg("config"), py::arg("out"), py::arg("step"), py::arg("condition") = py::none());
  m.def("analyze", [paths](const RunConfig& c, const std::filesystem::path& out, bool force) {
    return cmd_analyze(c, paths(out), force).specialization_rows;
  }, py::arg("config"), py::arg("out"), py::arg("force") = false);
  m.def("oracle", [paths](const RunConfig& c, const std::filesystem::path& out, bool force) {
    py::dict result;
    const auto ceilings = cmd_oracle(c, paths(out), force);
    for (std::size_t i = 0; i < ceilings.acc.size(); ++i) {
      if (ceilings.acc[i]) result[py::str(std::string(to_string(kAllConditions[i])))] = *ceilings.acc[i];
    }
    return result;
  }, py::arg("config"), py::arg("out"), py::arg("force") = false);
}

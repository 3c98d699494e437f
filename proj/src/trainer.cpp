#include "rhm/trainer.hpp"

#include <charconv>
#include <cmath>
#include <numbers>

#include "rhm/analysis.hpp"
#include "rhm/error.hpp"
#include "rhm/parallel.hpp"

namespace rhm {

namespace {

constexpr std::size_t kEvalChunk = 256;

void require(bool ok, const char* what) {
  if (!ok) throw ParameterError(std::string("train config: ") + what);
}

std::string fmt(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, end);
}

}  // namespace

void TrainConfig::validate() const {
  require(eta > 0 && std::isfinite(eta), "eta must be positive");
  require(weight_decay >= 0, "weight_decay must be >= 0");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "betas must lie in [0, 1)");
  require(eps > 0, "eps must be positive");
  require(batch >= 1, "batch must be >= 1");
  require(n_ct >= 1, "n_ct must be >= 1");
  require(total_steps >= 1, "total_steps must be >= 1");
  require(warmup_frac > 0 && warmup_frac < 1, "warmup_frac must lie in (0, 1)");
  require(floor_frac > 0 && floor_frac < 1, "floor_frac must lie in (0, 1)");
  require(start_frac > 0 && start_frac < 1, "start_frac must lie in (0, 1)");
  require(checkpoint_every >= 1, "checkpoint_every must be >= 1");
  require(eval_every >= 1, "eval_every must be >= 1");
  require(eval_episodes >= 1, "eval_episodes must be >= 1");
  require(grad_clip >= 0, "grad_clip must be >= 0");
  require(aux_mask_prob >= 0 && aux_mask_prob <= 1, "aux_mask_prob must lie in [0, 1]");
  require(mask_loss_weight >= 0 && root_loss_weight >= 0, "loss weights must be >= 0");
}

double lr_at(std::uint64_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) throw RangeError("lr_at: step beyond total_steps");
  const double T = static_cast<double>(cfg.total_steps);
  const double warm = std::floor(cfg.warmup_frac * T);
  const double t = static_cast<double>(step);
  if (t < warm) {
    return cfg.eta * (cfg.start_frac + (1.0 - cfg.start_frac) * t / warm);
  }
  const double span = T - warm;
  const double p = span > 0 ? (t - warm) / span : 1.0;
  const double decay = 0.5 * (1.0 - std::cos(std::numbers::pi * p));
  return cfg.eta * (1.0 - (1.0 - cfg.floor_frac) * decay);
}

template <class T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::uint64_t t, double lr, const TrainConfig& cfg, bool decay) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adamw_update: size mismatch");
  }
  if (t == 0) throw ParameterError("adamw_update: step count is 1-based");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const double lambda = decay ? cfg.weight_decay : 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double p = param[i];
    const double step = (mi / c1) / (std::sqrt(vi / c2) + cfg.eps) + lambda * p;
    param[i] = static_cast<T>(p - lr * step);
  }
}

namespace {

template <class T>
std::span<T> flat(Tensor<T>& t) {
  return {t.data(), static_cast<std::size_t>(t.size())};
}

template <class T>
std::span<const T> flat(const Tensor<T>& t) {
  return {t.data(), static_cast<std::size_t>(t.size())};
}

// Visits matching tensors of several same-shaped parameter sets.
template <class T, class F>
void zip_tensors(Parameters<T>& a, const Parameters<T>& b, Parameters<T>& c, Parameters<T>& d,
                 F&& f) {
  std::vector<const Tensor<T>*> bs;
  std::vector<Tensor<T>*> cs, ds;
  const_cast<Parameters<T>&>(b).for_each(
      [&](const std::string&, Tensor<T>& t, TensorKind) { bs.push_back(&t); });
  c.for_each([&](const std::string&, Tensor<T>& t, TensorKind) { cs.push_back(&t); });
  d.for_each([&](const std::string&, Tensor<T>& t, TensorKind) { ds.push_back(&t); });
  std::size_t i = 0;
  a.for_each([&](const std::string&, Tensor<T>& t, TensorKind kind) {
    if (i >= bs.size() || bs[i]->size() != t.size() || cs[i]->size() != t.size() ||
        ds[i]->size() != t.size()) {
      throw ShapeError("optimizer: parameter layout mismatch");
    }
    f(t, *bs[i], *cs[i], *ds[i], kind);
    ++i;
  });
}

}  // namespace

template <class T>
void adamw_step(Parameters<T>& params, const Gradients<T>& grads, OptimState<T>& state, double lr,
                const TrainConfig& cfg) {
  ++state.t;
  zip_tensors(params, grads, state.m, state.v,
              [&](Tensor<T>& p, const Tensor<T>& g, Tensor<T>& m, Tensor<T>& v, TensorKind kind) {
                adamw_update<T>(flat(p), flat(g), flat(m), flat(v), state.t, lr, cfg,
                                kind != TensorKind::NormGain);
              });
}

template <class T>
double global_norm(const Gradients<T>& grads) {
  double sq = 0.0;
  const_cast<Gradients<T>&>(grads).for_each([&](const std::string&, Tensor<T>& t, TensorKind) {
    sq += t.template cast<double>().squaredNorm();
  });
  return std::sqrt(sq);
}

EvalResult wilson_interval(std::size_t correct, std::size_t n) {
  EvalResult r;
  r.correct = correct;
  r.n = n;
  if (n == 0) return r;
  const double z = 1.959963984540054;
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(correct) / nn;
  const double denom = 1.0 + z * z / nn;
  const double centre = (p + z * z / (2.0 * nn)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / nn + z * z / (4.0 * nn * nn)) / denom;
  r.accuracy = p;
  r.ci_low = std::max(0.0, centre - half);
  r.ci_high = std::min(1.0, centre + half);
  return r;
}

EvalResult score_predictions(std::span<const std::uint32_t> predicted,
                             std::span<const TokenStream> streams) {
  if (predicted.size() != streams.size()) throw ShapeError("score_predictions: size mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < streams.size(); ++i) correct += predicted[i] == streams[i].target;
  return wilson_interval(correct, streams.size());
}

template <class T>
EvalResult evaluate(const Parameters<T>& params, const ModelConfig& config, const Experiment& exp,
                    EvalCondition condition, std::size_t n_ct, std::size_t n_episodes, Philox& rng) {
  const auto streams = make_streams(exp, condition, n_ct, n_episodes, rng);
  std::vector<std::uint32_t> predicted;
  predicted.reserve(streams.size());
  for (std::size_t b = 0; b < streams.size(); b += kEvalChunk) {
    const std::span<const TokenStream> chunk(streams.data() + b,
                                             std::min(kEvalChunk, streams.size() - b));
    const auto trace = forward(params, chunk, config);
    const auto p = predict(trace, chunk, exp.v());
    predicted.insert(predicted.end(), p.begin(), p.end());
  }
  return score_predictions(predicted, streams);
}

template <class T>
double overall_specialization(const Parameters<T>& params, const ModelConfig& config,
                              const Experiment& exp, std::span<const TokenStream> streams) {
  if (streams.empty()) throw ParameterError("overall_specialization: no episodes");
  const auto& gp = exp.grammar.params();
  const std::size_t region = query_region_length(config.mode, gp.length());
  const auto grouping =
      RelationGrouping::build(gp.s, gp.L, region, config.mode == Objective::Causal);
  std::vector<EpisodeAttention> maps;
  maps.reserve(streams.size());
  for (std::size_t b = 0; b < streams.size(); b += kEvalChunk) {
    const std::span<const TokenStream> chunk(streams.data() + b,
                                             std::min(kEvalChunk, streams.size() - b));
    const auto trace = forward(params, chunk, config);
    for (std::size_t e = 0; e < chunk.size(); ++e) {
      maps.push_back(extract_query_attention(trace, e, chunk[e], region));
    }
  }
  return layer_specialization(maps, grouping).overall;
}

std::string format_metrics_row(std::int64_t step, const MetricsRow& row) {
  std::string out = std::to_string(step);
  auto field = [&](const std::optional<double>& x) {
    out += ',';
    if (x) out += fmt(*x);
  };
  field(row.lr);
  field(row.train_loss);
  for (const auto& a : row.acc) field(a);
  field(row.spec_score_mean);
  return out;
}

std::vector<std::uint64_t> checkpoint_schedule(const TrainConfig& cfg) {
  std::vector<std::uint64_t> steps;
  for (std::uint64_t s = 0; s < cfg.total_steps; s += cfg.checkpoint_every) steps.push_back(s);
  steps.push_back(cfg.total_steps);
  return steps;
}

std::vector<TokenStream> training_batch(const Experiment& exp, const TrainConfig& cfg,
                                        std::uint64_t step) {
  Philox rng(cfg.seed, Stream::Batch, step);
  auto streams = make_streams(exp, EvalCondition::Mem, cfg.n_ct, cfg.batch, rng);
  if (cfg.aux_mask_prob > 0 && exp.encode.mode == Objective::Masked) {
    for (auto& s : streams) apply_aux_masking(s, exp.encode, cfg.aux_mask_prob, rng);
  }
  return streams;
}

TrainSummary train(const Experiment& exp, const ModelConfig& model_cfg, const TrainConfig& cfg,
                   const TrainHooks& hooks) {
  model_cfg.validate();
  cfg.validate();
  retain_large_allocations();
  const std::uint64_t last = hooks.stop_at.value_or(cfg.total_steps);
  if (last > cfg.total_steps) throw ParameterError("train: stop_at beyond total_steps");

  TrainSummary out;
  ModelState& state = out.final_state;
  state.config = model_cfg;
  {
    Philox init(cfg.seed, Stream::Init);
    state.params = init_params<float>(model_cfg, init);
  }
  state.optim = init_optim(state.params);

  LossSpec spec;
  spec.final_only = cfg.final_target_only;
  spec.mask_weight = cfg.mask_loss_weight;
  spec.root_weight = cfg.root_loss_weight;

  std::vector<TokenStream> spec_streams;
  if (cfg.spec_episodes > 0) {
    Philox rng(cfg.seed, Stream::Analysis);
    spec_streams = make_streams(exp, EvalCondition::Mem, cfg.n_ct, cfg.spec_episodes, rng);
  }

  const auto schedule = checkpoint_schedule(cfg);
  std::size_t next_ckpt = 0;
  if (hooks.metrics) *hooks.metrics << kMetricsHeader << '\n';

  for (std::uint64_t step = 0; step <= last; ++step) {
    state.step = step;
    while (next_ckpt < schedule.size() && schedule[next_ckpt] < step) ++next_ckpt;
    if (next_ckpt < schedule.size() && schedule[next_ckpt] == step) {
      out.checkpoint_steps.push_back(step);
      if (hooks.checkpoint) hooks.checkpoint(state);
    }

    const auto batch = training_batch(exp, cfg, step);
    const auto trace = forward(state.params, std::span<const TokenStream>(batch), model_cfg);
    const auto result = loss(trace, std::span<const TokenStream>(batch), spec);
    if (!std::isfinite(result.total)) {
      throw NonFiniteError("train: non-finite loss at step " + std::to_string(step));
    }
    out.losses.push_back(result.total);

    MetricsRow row;
    row.step = step;
    row.lr = lr_at(step, cfg);
    row.train_loss = result.total;
    if (step % cfg.eval_every == 0 || step == last) {
      for (std::size_t c = 0; c < kAllConditions.size(); ++c) {
        const auto cond = kAllConditions[c];
        if (!exp.available(cond)) continue;
        Philox rng(cfg.seed, Stream::Eval, c);
        row.acc[c] =
            evaluate(state.params, model_cfg, exp, cond, cfg.n_ct, cfg.eval_episodes, rng).accuracy;
      }
      if (!spec_streams.empty()) {
        row.spec_score_mean = overall_specialization(state.params, model_cfg, exp, spec_streams);
      }
      out.evals.push_back(row);
      if (hooks.on_eval) hooks.on_eval(row);
    }
    if (hooks.metrics) {
      *hooks.metrics << format_metrics_row(static_cast<std::int64_t>(step), row) << '\n';
      if (row.acc[0] || row.spec_score_mean) hooks.metrics->flush();
    }

    if (step == last) break;
    auto grads = backward(state.params, trace, result.dlogits);
    if (cfg.grad_clip > 0) {
      const double norm = global_norm(grads);
      if (!std::isfinite(norm)) {
        throw NonFiniteError("train: non-finite gradient at step " + std::to_string(step));
      }
      if (norm > cfg.grad_clip) {
        const float scale = static_cast<float>(cfg.grad_clip / norm);
        grads.for_each([&](const std::string&, Tensor<float>& t, TensorKind) { t *= scale; });
      }
    }
    adamw_step(state.params, grads, state.optim, lr_at(step, cfg), cfg);
  }
  if (hooks.metrics) hooks.metrics->flush();
  return out;
}

template void adamw_update<float>(std::span<float>, std::span<const float>, std::span<float>,
                                  std::span<float>, std::uint64_t, double, const TrainConfig&, bool);
template void adamw_update<double>(std::span<double>, std::span<const double>, std::span<double>,
                                   std::span<double>, std::uint64_t, double, const TrainConfig&,
                                   bool);
template void adamw_step<float>(Parameters<float>&, const Gradients<float>&, OptimState<float>&,
                                double, const TrainConfig&);
template void adamw_step<double>(Parameters<double>&, const Gradients<double>&, OptimState<double>&,
                                 double, const TrainConfig&);
template double global_norm<float>(const Gradients<float>&);
template double global_norm<double>(const Gradients<double>&);
template EvalResult evaluate<float>(const Parameters<float>&, const ModelConfig&, const Experiment&,
                                    EvalCondition, std::size_t, std::size_t, Philox&);
template EvalResult evaluate<double>(const Parameters<double>&, const ModelConfig&,
                                     const Experiment&, EvalCondition, std::size_t, std::size_t,
                                     Philox&);
template double overall_specialization<float>(const Parameters<float>&, const ModelConfig&,
                                              const Experiment&, std::span<const TokenStream>);
template double overall_specialization<double>(const Parameters<double>&, const ModelConfig&,
                                               const Experiment&, std::span<const TokenStream>);

}  // namespace rhm

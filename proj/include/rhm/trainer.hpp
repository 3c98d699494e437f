#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "rhm/experiment.hpp"
#include "rhm/model.hpp"

namespace rhm {

struct TrainConfig {
  double eta = 1.5e-4;
  double weight_decay = 2.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::uint32_t batch = 1024;
  std::uint32_t n_ct = 32;
  std::uint64_t total_steps = 200000;
  double warmup_frac = 0.05;
  double floor_frac = 0.1;
  double start_frac = 0.01;
  std::uint64_t checkpoint_every = 10000;
  std::uint64_t seed = 0;
  std::uint64_t eval_every = 500;
  std::uint32_t eval_episodes = 2048;
  std::uint32_t spec_episodes = 256;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  bool final_target_only = false;
  double mask_loss_weight = 1.0;
  double root_loss_weight = 1.0;
  double aux_mask_prob = 0.0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Linear warmup from start_frac * eta to eta over warmup_frac * total_steps,
// then cosine decay to floor_frac * eta at total_steps.
// Throws RangeError outside [0, total_steps].
double lr_at(std::uint64_t step, const TrainConfig& cfg);

template <class T>
struct OptimState {
  Parameters<T> m;
  Parameters<T> v;
  std::uint64_t t = 0;
};

template <class T>
OptimState<T> init_optim(const Parameters<T>& params) {
  return {zeros_like(params), zeros_like(params), 0};
}

// One decoupled-decay AdamW update of a flat tensor at step t (1-based):
//   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2
//   p -= lr * (m_hat / (sqrt(v_hat) + eps) + lambda * p)   [decay only if `decay`]
template <class T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::uint64_t t, double lr, const TrainConfig& cfg, bool decay);

// Applies adamw_update to every tensor; norm gains are exempt from decay.
template <class T>
void adamw_step(Parameters<T>& params, const Gradients<T>& grads, OptimState<T>& state, double lr,
                const TrainConfig& cfg);

template <class T>
double global_norm(const Gradients<T>& grads);

struct EvalResult {
  double accuracy = 0.0;
  double ci_low = 0.0;  // Wilson 95%
  double ci_high = 0.0;
  std::size_t correct = 0;
  std::size_t n = 0;
};

EvalResult wilson_interval(std::size_t correct, std::size_t n);

EvalResult score_predictions(std::span<const std::uint32_t> predicted,
                             std::span<const TokenStream> streams);

template <class T>
EvalResult evaluate(const Parameters<T>& params, const ModelConfig& config, const Experiment& exp,
                    EvalCondition condition, std::size_t n_ct, std::size_t n_episodes, Philox& rng);

// Mean specialization over all layers and heads on a fixed episode batch.
template <class T>
double overall_specialization(const Parameters<T>& params, const ModelConfig& config,
                              const Experiment& exp, std::span<const TokenStream> streams);

struct ModelState {
  ModelConfig config;
  Parameters<float> params;
  OptimState<float> optim;
  std::uint64_t step = 0;
};

struct MetricsRow {
  std::uint64_t step = 0;
  std::optional<double> lr;
  std::optional<double> train_loss;
  std::array<std::optional<double>, 4> acc;  // mem, ind, gensame, transfer
  std::optional<double> spec_score_mean;
};

inline constexpr const char* kMetricsHeader =
    "step,lr,train_loss,acc_mem,acc_ind,acc_gensame,acc_transfer,spec_score_mean";

// Signed step so oracle ceilings can use step -1.
std::string format_metrics_row(std::int64_t step, const MetricsRow& row);

struct TrainHooks {
  std::ostream* metrics = nullptr;  // receives header + one row per step
  std::function<void(const ModelState&)> checkpoint;
  std::function<void(const MetricsRow&)> on_eval;
  // Last step to run (inclusive); the schedule still spans total_steps.
  std::optional<std::uint64_t> stop_at;
};

struct TrainSummary {
  std::vector<std::uint64_t> checkpoint_steps;
  std::vector<MetricsRow> evals;
  std::vector<double> losses;
  ModelState final_state;
};

// Checkpoints at step 0, every checkpoint_every steps, and total_steps.
std::vector<std::uint64_t> checkpoint_schedule(const TrainConfig& cfg);

// Online episodic training on the train split. Throws NonFiniteError when
// the loss stops being finite.
TrainSummary train(const Experiment& exp, const ModelConfig& model_cfg, const TrainConfig& cfg,
                   const TrainHooks& hooks = {});

// Training batch for one step, drawn from the step's own stream.
std::vector<TokenStream> training_batch(const Experiment& exp, const TrainConfig& cfg,
                                        std::uint64_t step);

}  // namespace rhm

#pragma once

// Central-difference check of the analytic backward pass, in double.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "rhm/model.hpp"
#include "rhm/tasks.hpp"

namespace rhm::ref {

// Random streams of length `len` over grammar tokens [0, v). Masked streams
// get a MASK at position len - 2 and, with root_slot, a ROOT at position 0.
inline std::vector<TokenStream> random_streams(const ModelConfig& cfg, std::uint32_t v,
                                               std::size_t batch, std::size_t len, Philox& rng,
                                               bool root_slot = false) {
  const auto sp = SpecialTokens::after(v);
  std::vector<TokenStream> out(batch);
  for (auto& s : out) {
    s.ids.resize(len);
    for (auto& x : s.ids) x = static_cast<std::uint32_t>(rng.below(v));
    s.target = static_cast<std::uint32_t>(rng.below(v));
    if (cfg.mode == Objective::Causal) {
      s.target_position = len;
    } else {
      s.target_position = len - 2;
      s.ids[s.target_position] = sp.mask;
      if (root_slot) {
        s.ids[0] = sp.root;
        s.root_slot = 0;
        s.root_label = static_cast<std::uint32_t>(rng.below(cfg.root_classes));
      }
    }
  }
  return out;
}

inline double total_loss(const Parameters<double>& p, std::span<const TokenStream> streams,
                         const ModelConfig& cfg, const LossSpec& spec) {
  return loss(forward(p, streams, cfg), streams, spec).total;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
};

// Compares `per_tensor` random entries of every tensor. The relative error is
// |a - n| / max(|a| + |n|, floor) so that vanishing gradients don't blow up.
inline GradCheckResult grad_check(const Parameters<double>& params,
                                  std::span<const TokenStream> streams, const ModelConfig& cfg,
                                  const LossSpec& spec, std::size_t per_tensor, Philox& rng,
                                  double h = 1e-6, double floor = 1e-7) {
  const auto trace = forward(params, streams, cfg);
  const auto lr = loss(trace, streams, spec);
  const auto grads = backward(params, trace, lr.dlogits);

  std::vector<const Tensor<double>*> analytic;
  grads.for_each([&](const std::string&, const Tensor<double>& t, TensorKind) { analytic.push_back(&t); });

  GradCheckResult res;
  Parameters<double> work = params;
  std::size_t idx = 0;
  work.for_each([&](const std::string& name, Tensor<double>& t, TensorKind) {
    const Tensor<double>& g = *analytic[idx++];
    for (std::size_t c = 0; c < per_tensor; ++c) {
      const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(t.size())));
      const double orig = t.data()[i];
      t.data()[i] = orig + h;
      const double up = total_loss(work, streams, cfg, spec);
      t.data()[i] = orig - h;
      const double down = total_loss(work, streams, cfg, spec);
      t.data()[i] = orig;
      const double num = (up - down) / (2 * h);
      const double a = g.data()[i];
      const double rel = std::abs(a - num) / std::max(std::abs(a) + std::abs(num), floor);
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_tensor = name;
      }
      ++res.checked;
    }
  });
  return res;
}

}  // namespace rhm::ref

#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rhm/rng.hpp"
#include "rhm/tasks.hpp"

namespace rhm {

template <class T>
using Tensor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  std::uint32_t depth = 4;
  std::uint32_t heads = 4;
  std::uint32_t d_embed = 64;
  std::uint32_t widen = 4;
  double theta = 10000.0;
  std::uint32_t vocab = 11;  // includes special tokens
  Objective mode = Objective::Causal;
  bool root_head = false;          // masked mode only
  std::uint32_t root_classes = 8;  // root head scores token ids [0, root_classes)
  double ln_eps = 1e-5;

  void validate() const;
  std::uint32_t head_dim() const { return d_embed / heads; }
  std::uint32_t hidden() const { return widen * d_embed; }

  bool operator==(const ModelConfig&) const = default;
};

enum class TensorKind { Embedding, Linear, MlpOut, NormGain };

template <class T>
struct LayerParams {
  Tensor<T> ln1;  // 1 x D gain
  Tensor<T> wq, wk, wv, wo;  // D x D, applied as x * W
  Tensor<T> ln2;
  Tensor<T> w_in;   // D x widen*D
  Tensor<T> w_out;  // widen*D x D
};

// No bias anywhere. The embedding matrix doubles as the output projection.
template <class T>
struct Parameters {
  Tensor<T> embedding;  // vocab x D
  std::vector<LayerParams<T>> layers;
  Tensor<T> ln_final;

  // f(const std::string& name, Tensor<T>& tensor, TensorKind kind), fixed order.
  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::size_t size() const;

  template <class U>
  Parameters<U> cast() const {
    Parameters<U> out;
    out.embedding = embedding.template cast<U>();
    out.ln_final = ln_final.template cast<U>();
    for (const auto& l : layers) {
      out.layers.push_back({l.ln1.template cast<U>(), l.wq.template cast<U>(),
                            l.wk.template cast<U>(), l.wv.template cast<U>(), l.wo.template cast<U>(),
                            l.ln2.template cast<U>(), l.w_in.template cast<U>(),
                            l.w_out.template cast<U>()});
    }
    return out;
  }

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f(std::string("embedding"), self.embedding, TensorKind::Embedding);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      f(p + "ln1", l.ln1, TensorKind::NormGain);
      f(p + "attn.q", l.wq, TensorKind::Linear);
      f(p + "attn.k", l.wk, TensorKind::Linear);
      f(p + "attn.v", l.wv, TensorKind::Linear);
      f(p + "attn.o", l.wo, TensorKind::Linear);
      f(p + "ln2", l.ln2, TensorKind::NormGain);
      f(p + "mlp.in", l.w_in, TensorKind::Linear);
      f(p + "mlp.out", l.w_out, TensorKind::MlpOut);
    }
    f(std::string("ln_final"), self.ln_final, TensorKind::NormGain);
  }
};

template <class T>
using Gradients = Parameters<T>;

template <class T>
Parameters<T> zeros_like(const Parameters<T>& p);

// Weights ~ N(0, 0.02^2); MLP output weights ~ N(0, 0.02^2 / (2 * depth));
// norm gains = 1. Draws are made in double and rounded to T.
template <class T>
Parameters<T> init_params(const ModelConfig& config, Philox& rng);

// Rotates interleaved pairs (2i, 2i+1) of each row by position * theta^(-2i/dim).
// Rows of x are vectors, positions[r] is the position of row r.
template <class T>
Tensor<T> rope_rotate(const Tensor<T>& x, std::span<const std::size_t> positions, double theta,
                      bool inverse = false);

template <class T>
struct LayerCache {
  Tensor<T> x_in;
  Tensor<T> xhat1;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std1;
  Tensor<T> a;        // LN1 output
  Tensor<T> q, k, v;  // q and k after rotary embedding
  std::vector<Tensor<T>> probs;  // [episode * heads + head], length x length
  Tensor<T> concat;   // per-head outputs before the output projection
  Tensor<T> x_mid;
  Tensor<T> xhat2;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std2;
  Tensor<T> b;  // LN2 output
  Tensor<T> u;  // MLP pre-activation
  Tensor<T> x_out;
};

template <class T>
struct ForwardTrace {
  ModelConfig config;
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint32_t> tokens;  // batch * length
  std::vector<LayerCache<T>> layers;
  Tensor<T> xhat_f;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std_f;
  Tensor<T> z;       // final LN output
  Tensor<T> logits;  // (batch * length) x vocab

  const Tensor<T>& attention(std::size_t layer, std::size_t episode, std::size_t head) const {
    return layers[layer].probs[episode * config.heads + head];
  }
  // Post-block residual stream of `layer`, (batch * length) x D.
  const Tensor<T>& residual(std::size_t layer) const { return layers[layer].x_out; }
  std::size_t row(std::size_t episode, std::size_t position) const {
    return episode * length + position;
  }
};

// All streams in a batch must have equal length. Throws ShapeError otherwise
// or when a token id is outside the vocabulary.
template <class T>
ForwardTrace<T> forward(const Parameters<T>& params, std::span<const TokenStream> streams,
                        const ModelConfig& config);

struct LossSpec {
  double scale = 1.0;
  bool final_only = false;   // causal: score only the query target
  double mask_weight = 1.0;  // masked: MASK-position term
  double root_weight = 1.0;  // masked: root classification term
  double aux_weight = 1.0;   // masked: auxiliary context masking term
};

template <class T>
struct LossResult {
  double total = 0.0;
  std::vector<std::pair<std::string, double>> terms;  // unweighted batch means
  Tensor<T> dlogits;  // d total / d logits
};

template <class T>
LossResult<T> loss(const ForwardTrace<T>& trace, std::span<const TokenStream> streams,
                   const LossSpec& spec = {});

template <class T>
Gradients<T> backward(const Parameters<T>& params, const ForwardTrace<T>& trace,
                      const Tensor<T>& dlogits);

// Argmax over grammar tokens [0, v) at each stream's prediction row; ties go
// to the lowest id.
template <class T>
std::vector<std::uint32_t> predict(const ForwardTrace<T>& trace,
                                   std::span<const TokenStream> streams, std::uint32_t v);

}  // namespace rhm

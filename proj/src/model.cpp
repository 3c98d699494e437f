#include "rhm/model.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "rhm/error.hpp"
#include "rhm/parallel.hpp"

namespace rhm {

void ModelConfig::validate() const {
  if (depth == 0) throw ParameterError("model: depth must be positive");
  if (heads == 0 || d_embed == 0) throw ParameterError("model: heads and d_embed must be positive");
  if (d_embed % heads != 0) throw ParameterError("model: d_embed must be divisible by heads");
  if (head_dim() % 2 != 0) throw ShapeError("model: head dimension must be even for rotary embedding");
  if (widen == 0) throw ParameterError("model: widen must be positive");
  if (!(theta > 0.0)) throw ParameterError("model: theta must be positive");
  if (vocab == 0) throw ParameterError("model: vocab must be positive");
  if (!(ln_eps > 0.0)) throw ParameterError("model: ln_eps must be positive");
  if (root_head) {
    if (mode != Objective::Masked) throw ParameterError("model: root_head requires masked mode");
    if (root_classes == 0 || root_classes > vocab) {
      throw ParameterError("model: root_classes must lie in [1, vocab]");
    }
  }
}

template <class T>
std::size_t Parameters<T>::size() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor<T>& t, TensorKind) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

template <class T>
Parameters<T> zeros_like(const Parameters<T>& p) {
  Parameters<T> z = p;
  z.for_each([](const std::string&, Tensor<T>& t, TensorKind) { t.setZero(); });
  return z;
}

template <class T>
Parameters<T> init_params(const ModelConfig& config, Philox& rng) {
  config.validate();
  const auto D = static_cast<Eigen::Index>(config.d_embed);
  const auto H = static_cast<Eigen::Index>(config.hidden());
  const double std_w = 0.02;
  const double std_out = 0.02 / std::sqrt(2.0 * config.depth);

  auto gaussian = [&](Eigen::Index rows, Eigen::Index cols, double sd) {
    Tensor<T> t(rows, cols);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<T>(sd * rng.normal());
    return t;
  };
  auto ones = [&] { return Tensor<T>::Ones(1, D); };

  Parameters<T> p;
  p.embedding = gaussian(config.vocab, D, std_w);
  for (std::uint32_t l = 0; l < config.depth; ++l) {
    LayerParams<T> layer;
    layer.ln1 = ones();
    layer.wq = gaussian(D, D, std_w);
    layer.wk = gaussian(D, D, std_w);
    layer.wv = gaussian(D, D, std_w);
    layer.wo = gaussian(D, D, std_w);
    layer.ln2 = ones();
    layer.w_in = gaussian(D, H, std_w);
    layer.w_out = gaussian(H, D, std_out);
    p.layers.push_back(std::move(layer));
  }
  p.ln_final = ones();
  return p;
}

namespace {

template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct RopeTable {
  std::vector<double> cos, sin;  // [position * half + pair]
  std::size_t half = 0;
};

RopeTable rope_table(std::size_t positions, std::size_t dim, double theta) {
  RopeTable t;
  t.half = dim / 2;
  t.cos.resize(positions * t.half);
  t.sin.resize(positions * t.half);
  for (std::size_t i = 0; i < t.half; ++i) {
    const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    for (std::size_t pos = 0; pos < positions; ++pos) {
      const double angle = static_cast<double>(pos) * freq;
      t.cos[pos * t.half + i] = std::cos(angle);
      t.sin[pos * t.half + i] = std::sin(angle);
    }
  }
  return t;
}

// Rotates every head of every row of x (rows x heads*dim); row r sits at
// position r % length.
template <class T>
void rope_apply(Tensor<T>& x, std::size_t heads, std::size_t dim, std::size_t length,
                const RopeTable& table, bool inverse) {
  const T sign = inverse ? T(-1) : T(1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const std::size_t pos = static_cast<std::size_t>(r) % length;
    T* row = x.row(r).data();
    for (std::size_t h = 0; h < heads; ++h) {
      T* v = row + h * dim;
      for (std::size_t i = 0; i < table.half; ++i) {
        const T c = static_cast<T>(table.cos[pos * table.half + i]);
        const T s = sign * static_cast<T>(table.sin[pos * table.half + i]);
        const T x0 = v[2 * i];
        const T x1 = v[2 * i + 1];
        v[2 * i] = x0 * c - x1 * s;
        v[2 * i + 1] = x0 * s + x1 * c;
      }
    }
  }
}

template <class T>
void layer_norm(const Tensor<T>& x, const Tensor<T>& gain, double eps, Tensor<T>& xhat,
                Vec<T>& inv_std, Tensor<T>& y) {
  const auto D = static_cast<T>(x.cols());
  const Vec<T> mean = x.rowwise().sum() / D;
  xhat = x.colwise() - mean;
  inv_std = ((xhat.rowwise().squaredNorm() / D).array() + static_cast<T>(eps)).rsqrt().matrix();
  xhat = inv_std.asDiagonal() * xhat;
  y = xhat * gain.row(0).asDiagonal();
}

// Returns dx; accumulates dgain.
template <class T>
Tensor<T> layer_norm_backward(const Tensor<T>& dy, const Tensor<T>& gain, const Tensor<T>& xhat,
                              const Vec<T>& inv_std, Tensor<T>& dgain) {
  const auto D = static_cast<T>(dy.cols());
  dgain += (dy.array() * xhat.array()).colwise().sum().matrix();
  Tensor<T> dxhat = dy * gain.row(0).asDiagonal();
  const Vec<T> m1 = dxhat.rowwise().sum() / D;
  const Vec<T> m2 = (dxhat.array() * xhat.array()).rowwise().sum().matrix() / D;
  Tensor<T> dx = dxhat.colwise() - m1;
  dx -= m2.asDiagonal() * xhat;
  return inv_std.asDiagonal() * dx;
}

}  // namespace

template <class T>
Tensor<T> rope_rotate(const Tensor<T>& x, std::span<const std::size_t> positions, double theta,
                      bool inverse) {
  if (x.cols() % 2 != 0) throw ShapeError("rope_rotate: head dimension must be even");
  if (static_cast<std::size_t>(x.rows()) != positions.size()) {
    throw ShapeError("rope_rotate: one position per row required");
  }
  const std::size_t dim = static_cast<std::size_t>(x.cols());
  const std::size_t half = dim / 2;
  Tensor<T> out = x;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double pos = static_cast<double>(positions[static_cast<std::size_t>(r)]);
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      const T c = static_cast<T>(std::cos(pos * freq));
      const T s = static_cast<T>((inverse ? -1.0 : 1.0) * std::sin(pos * freq));
      const T x0 = x(r, 2 * i);
      const T x1 = x(r, 2 * i + 1);
      out(r, 2 * i) = x0 * c - x1 * s;
      out(r, 2 * i + 1) = x0 * s + x1 * c;
    }
  }
  return out;
}

template <class T>
ForwardTrace<T> forward(const Parameters<T>& params, std::span<const TokenStream> streams,
                        const ModelConfig& config) {
  config.validate();
  if (streams.empty()) throw ShapeError("forward: empty batch");
  const std::size_t length = streams.front().ids.size();
  if (length == 0) throw ShapeError("forward: empty stream");
  for (const auto& s : streams) {
    if (s.ids.size() != length) throw ShapeError("forward: streams in a batch must have equal length");
    for (auto id : s.ids) {
      if (id >= config.vocab) {
        std::ostringstream os;
        os << "forward: token id " << id << " outside vocabulary of " << config.vocab;
        throw ShapeError(os.str());
      }
    }
  }
  if (params.layers.size() != config.depth ||
      params.embedding.rows() != static_cast<Eigen::Index>(config.vocab) ||
      params.embedding.cols() != static_cast<Eigen::Index>(config.d_embed)) {
    throw ShapeError("forward: parameters do not match the model config");
  }

  const std::size_t batch = streams.size();
  const std::size_t heads = config.heads;
  const std::size_t dim = config.head_dim();
  const auto D = static_cast<Eigen::Index>(config.d_embed);
  const auto rows = static_cast<Eigen::Index>(batch * length);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dim)));
  const bool causal = config.mode == Objective::Causal;
  const RopeTable table = rope_table(length, dim, config.theta);

  ForwardTrace<T> tr;
  tr.config = config;
  tr.batch = batch;
  tr.length = length;
  tr.tokens.reserve(batch * length);
  for (const auto& s : streams) tr.tokens.insert(tr.tokens.end(), s.ids.begin(), s.ids.end());

  Tensor<T> x(rows, D);
  for (Eigen::Index r = 0; r < rows; ++r) x.row(r) = params.embedding.row(tr.tokens[static_cast<std::size_t>(r)]);

  tr.layers.resize(config.depth);
  for (std::size_t l = 0; l < config.depth; ++l) {
    const auto& p = params.layers[l];
    auto& c = tr.layers[l];
    c.x_in = x;
    layer_norm(c.x_in, p.ln1, config.ln_eps, c.xhat1, c.inv_std1, c.a);
    c.q.noalias() = c.a * p.wq;
    c.k.noalias() = c.a * p.wk;
    c.v.noalias() = c.a * p.wv;
    rope_apply(c.q, heads, dim, length, table, false);
    rope_apply(c.k, heads, dim, length, table, false);

    c.probs.resize(batch * heads);
    c.concat.resize(rows, D);
    parallel_for(batch, [&](std::size_t begin, std::size_t end) {
      for (std::size_t n = begin; n < end; ++n) {
        const auto r0 = static_cast<Eigen::Index>(n * length);
        const auto len = static_cast<Eigen::Index>(length);
        for (std::size_t h = 0; h < heads; ++h) {
          const auto c0 = static_cast<Eigen::Index>(h * dim);
          const auto dh = static_cast<Eigen::Index>(dim);
          Tensor<T> scores = (c.q.block(r0, c0, len, dh) * c.k.block(r0, c0, len, dh).transpose()) * scale;
          Tensor<T>& probs = c.probs[n * heads + h];
          probs.setZero(len, len);
          for (Eigen::Index i = 0; i < len; ++i) {
            const Eigen::Index keys = causal ? i + 1 : len;
            const T mx = scores.row(i).head(keys).maxCoeff();
            auto out = probs.row(i).head(keys);
            out = (scores.row(i).head(keys).array() - mx).exp().matrix();
            out /= out.sum();
          }
          c.concat.block(r0, c0, len, dh).noalias() = probs * c.v.block(r0, c0, len, dh);
        }
      }
    });

    c.x_mid = c.x_in;
    c.x_mid.noalias() += c.concat * p.wo;
    layer_norm(c.x_mid, p.ln2, config.ln_eps, c.xhat2, c.inv_std2, c.b);
    c.u.noalias() = c.b * p.w_in;
    c.x_out = c.x_mid;
    c.x_out.noalias() += c.u.cwiseMax(T(0)) * p.w_out;
    x = c.x_out;
  }

  layer_norm(x, params.ln_final, config.ln_eps, tr.xhat_f, tr.inv_std_f, tr.z);
  tr.logits.noalias() = tr.z * params.embedding.transpose();
  return tr;
}

namespace {

// Adds weight * d(cross-entropy)/d(logits) into drow; returns the loss.
template <class T>
double cross_entropy(const T* logits, T* drow, std::size_t count, std::uint32_t target, double weight) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < count; ++i) mx = std::max(mx, static_cast<double>(logits[i]));
  double sum = 0.0;
  for (std::size_t i = 0; i < count; ++i) sum += std::exp(static_cast<double>(logits[i]) - mx);
  const double lse = mx + std::log(sum);
  if (weight != 0.0) {
    for (std::size_t i = 0; i < count; ++i) {
      const double pr = std::exp(static_cast<double>(logits[i]) - lse);
      drow[i] += static_cast<T>(weight * (pr - (i == target ? 1.0 : 0.0)));
    }
  }
  return lse - static_cast<double>(logits[target]);
}

}  // namespace

template <class T>
LossResult<T> loss(const ForwardTrace<T>& trace, std::span<const TokenStream> streams,
                   const LossSpec& spec) {
  if (streams.size() != trace.batch) throw ShapeError("loss: batch size mismatch");
  const auto& cfg = trace.config;
  const std::size_t V = cfg.vocab;
  const std::size_t len = trace.length;
  const double per_episode = 1.0 / static_cast<double>(trace.batch);

  LossResult<T> out;
  out.dlogits.setZero(trace.logits.rows(), trace.logits.cols());
  auto logits_row = [&](std::size_t r) { return trace.logits.row(static_cast<Eigen::Index>(r)).data(); };
  auto grad_row = [&](std::size_t r) { return out.dlogits.row(static_cast<Eigen::Index>(r)).data(); };

  if (cfg.mode == Objective::Causal) {
    double term = 0.0;
    for (std::size_t n = 0; n < trace.batch; ++n) {
      const auto& s = streams[n];
      const std::size_t first = spec.final_only ? len - 1 : 0;
      const double w = spec.scale * per_episode / static_cast<double>(len - first);
      double ep = 0.0;
      for (std::size_t t = first; t < len; ++t) {
        const std::uint32_t target = t + 1 < len ? s.ids[t + 1] : s.target;
        const std::size_t r = trace.row(n, t);
        ep += cross_entropy(logits_row(r), grad_row(r), V, target, w);
      }
      term += ep / static_cast<double>(len - first);
    }
    term *= per_episode;
    out.terms.emplace_back("next_token", term);
    out.total = spec.scale * term;
    return out;
  }

  double mask_term = 0.0, root_term = 0.0, aux_term = 0.0;
  bool any_aux = false;
  for (std::size_t n = 0; n < trace.batch; ++n) {
    const auto& s = streams[n];
    const std::size_t r = trace.row(n, s.target_position);
    mask_term += cross_entropy(logits_row(r), grad_row(r), V, s.target,
                               spec.scale * spec.mask_weight * per_episode);
    if (cfg.root_head) {
      if (!s.root_slot) throw ShapeError("loss: root head enabled but stream has no root slot");
      const std::size_t rr = trace.row(n, *s.root_slot);
      root_term += cross_entropy(logits_row(rr), grad_row(rr), cfg.root_classes, s.root_label,
                                 spec.scale * spec.root_weight * per_episode);
    }
    if (!s.aux_targets.empty()) {
      any_aux = true;
      const double w = spec.scale * spec.aux_weight * per_episode /
                       static_cast<double>(s.aux_targets.size());
      double ep = 0.0;
      for (const auto& [pos, tok] : s.aux_targets) {
        const std::size_t ra = trace.row(n, pos);
        ep += cross_entropy(logits_row(ra), grad_row(ra), V, tok, w);
      }
      aux_term += ep / static_cast<double>(s.aux_targets.size());
    }
  }
  mask_term *= per_episode;
  out.terms.emplace_back("masked_token", mask_term);
  out.total = spec.mask_weight * mask_term;
  if (cfg.root_head) {
    root_term *= per_episode;
    out.terms.emplace_back("root", root_term);
    out.total += spec.root_weight * root_term;
  }
  if (any_aux) {
    aux_term *= per_episode;
    out.terms.emplace_back("aux_masked", aux_term);
    out.total += spec.aux_weight * aux_term;
  }
  out.total *= spec.scale;
  return out;
}

template <class T>
Gradients<T> backward(const Parameters<T>& params, const ForwardTrace<T>& trace,
                      const Tensor<T>& dlogits) {
  const auto& cfg = trace.config;
  const std::size_t batch = trace.batch;
  const std::size_t length = trace.length;
  const std::size_t heads = cfg.heads;
  const std::size_t dim = cfg.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dim)));
  const RopeTable table = rope_table(length, dim, cfg.theta);
  if (dlogits.rows() != trace.logits.rows() || dlogits.cols() != trace.logits.cols()) {
    throw ShapeError("backward: dlogits shape mismatch");
  }

  Gradients<T> g = zeros_like(params);

  // Tied output projection: logits = z * E^T.
  g.embedding.noalias() += dlogits.transpose() * trace.z;
  Tensor<T> dz = dlogits * params.embedding;
  Tensor<T> dx = layer_norm_backward(dz, params.ln_final, trace.xhat_f, trace.inv_std_f, g.ln_final);

  for (std::size_t l = cfg.depth; l-- > 0;) {
    const auto& p = params.layers[l];
    const auto& c = trace.layers[l];
    auto& gl = g.layers[l];

    // MLP block: x_out = x_mid + relu(b W_in) W_out.
    const Tensor<T> relu = c.u.cwiseMax(T(0));
    gl.w_out.noalias() += relu.transpose() * dx;
    Tensor<T> du = dx * p.w_out.transpose();
    du = (c.u.array() > T(0)).select(du, T(0));
    gl.w_in.noalias() += c.b.transpose() * du;
    Tensor<T> db = du * p.w_in.transpose();
    dx += layer_norm_backward(db, p.ln2, c.xhat2, c.inv_std2, gl.ln2);

    // Attention block: x_mid = x_in + concat W_o.
    gl.wo.noalias() += c.concat.transpose() * dx;
    const Tensor<T> dconcat = dx * p.wo.transpose();
    Tensor<T> dq(dconcat.rows(), dconcat.cols());
    Tensor<T> dk(dconcat.rows(), dconcat.cols());
    Tensor<T> dv(dconcat.rows(), dconcat.cols());
    parallel_for(batch, [&](std::size_t begin, std::size_t end) {
      for (std::size_t n = begin; n < end; ++n) {
        const auto r0 = static_cast<Eigen::Index>(n * length);
        const auto len = static_cast<Eigen::Index>(length);
        const auto dh = static_cast<Eigen::Index>(dim);
        for (std::size_t h = 0; h < heads; ++h) {
          const auto c0 = static_cast<Eigen::Index>(h * dim);
          const Tensor<T>& probs = c.probs[n * heads + h];
          const auto dout = dconcat.block(r0, c0, len, dh);
          Tensor<T> dprobs = dout * c.v.block(r0, c0, len, dh).transpose();
          dv.block(r0, c0, len, dh).noalias() = probs.transpose() * dout;
          const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot =
              (dprobs.array() * probs.array()).rowwise().sum();
          Tensor<T> dscores = (probs.array() * (dprobs.colwise() - rowdot).array()).matrix() * scale;
          dq.block(r0, c0, len, dh).noalias() = dscores * c.k.block(r0, c0, len, dh);
          dk.block(r0, c0, len, dh).noalias() = dscores.transpose() * c.q.block(r0, c0, len, dh);
        }
      }
    });
    rope_apply(dq, heads, dim, length, table, true);
    rope_apply(dk, heads, dim, length, table, true);

    gl.wq.noalias() += c.a.transpose() * dq;
    gl.wk.noalias() += c.a.transpose() * dk;
    gl.wv.noalias() += c.a.transpose() * dv;
    Tensor<T> da = dq * p.wq.transpose();
    da.noalias() += dk * p.wk.transpose();
    da.noalias() += dv * p.wv.transpose();
    dx += layer_norm_backward(da, p.ln1, c.xhat1, c.inv_std1, gl.ln1);
  }

  for (Eigen::Index r = 0; r < dx.rows(); ++r) {
    g.embedding.row(trace.tokens[static_cast<std::size_t>(r)]) += dx.row(r);
  }
  return g;
}

template <class T>
std::vector<std::uint32_t> predict(const ForwardTrace<T>& trace,
                                   std::span<const TokenStream> streams, std::uint32_t v) {
  std::vector<std::uint32_t> out;
  out.reserve(streams.size());
  for (std::size_t n = 0; n < streams.size(); ++n) {
    const auto row = trace.logits.row(static_cast<Eigen::Index>(trace.row(n, streams[n].prediction_row())));
    std::uint32_t best = 0;
    for (std::uint32_t c = 1; c < v; ++c) {
      if (row(c) > row(best)) best = c;
    }
    out.push_back(best);
  }
  return out;
}

#define RHM_INSTANTIATE(T)                                                                        \
  template struct Parameters<T>;                                                                  \
  template Parameters<T> zeros_like(const Parameters<T>&);                                        \
  template Parameters<T> init_params<T>(const ModelConfig&, Philox&);                             \
  template Tensor<T> rope_rotate<T>(const Tensor<T>&, std::span<const std::size_t>, double, bool); \
  template ForwardTrace<T> forward<T>(const Parameters<T>&, std::span<const TokenStream>,          \
                                      const ModelConfig&);                                        \
  template LossResult<T> loss<T>(const ForwardTrace<T>&, std::span<const TokenStream>,             \
                                 const LossSpec&);                                                \
  template Gradients<T> backward<T>(const Parameters<T>&, const ForwardTrace<T>&,                  \
                                    const Tensor<T>&);                                            \
  template std::vector<std::uint32_t> predict<T>(const ForwardTrace<T>&,                           \
                                                 std::span<const TokenStream>, std::uint32_t);

RHM_INSTANTIATE(float)
RHM_INSTANTIATE(double)

#undef RHM_INSTANTIATE

}  // namespace rhm

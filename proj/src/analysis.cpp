#include "rhm/analysis.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "rhm/error.hpp"

namespace rhm {

std::uint32_t lca_height(std::uint32_t s, std::uint32_t L, std::size_t i, std::size_t j) {
  std::size_t d = 1;
  for (std::uint32_t l = 0; l < L; ++l) d *= s;
  if (i >= d || j >= d) throw RangeError("lca_height: position outside [0, s^L)");
  std::uint32_t h = 0;
  while (i != j) {
    i /= s;
    j /= s;
    ++h;
  }
  return h;
}

RelationGrouping RelationGrouping::build(std::uint32_t s, std::uint32_t L, std::size_t positions,
                                         bool causal) {
  RelationGrouping g;
  g.s = s;
  g.L = L;
  g.positions = positions;
  g.causal = causal;
  g.height.resize(positions * positions);
  for (std::size_t i = 0; i < positions; ++i) {
    for (std::size_t j = 0; j < positions; ++j) {
      g.height[i * positions + j] = static_cast<std::uint8_t>(lca_height(s, L, i, j));
    }
  }
  return g;
}

SpecializationDetail specialization_detail(const Eigen::MatrixXd& attn, const RelationGrouping& g) {
  if (attn.rows() != static_cast<Eigen::Index>(g.positions) ||
      attn.cols() != static_cast<Eigen::Index>(g.positions)) {
    throw ShapeError("specialization: attention map does not match the grouping");
  }
  const std::size_t groups = g.groups();
  SpecializationDetail out;
  std::vector<double> sums(groups, 0.0);
  out.group_sizes.assign(groups, 0);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < g.positions; ++i) {
    for (std::size_t j = 0; j < g.positions; ++j) {
      if (!g.included(i, j)) continue;
      const double a = attn(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      sums[g.at(i, j)] += a;
      ++out.group_sizes[g.at(i, j)];
      total += a;
      ++n;
    }
  }
  out.group_means.assign(groups, 0.0);
  for (std::size_t h = 0; h < groups; ++h) {
    if (out.group_sizes[h] > 0) out.group_means[h] = sums[h] / static_cast<double>(out.group_sizes[h]);
  }
  if (n == 0) return out;
  const double mean = total / static_cast<double>(n);

  double ss_total = 0.0;
  double ss_within = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < g.positions; ++i) {
    for (std::size_t j = 0; j < g.positions; ++j) {
      if (!g.included(i, j)) continue;
      const double a = attn(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      ss_total += (a - mean) * (a - mean);
      const double w = a - out.group_means[g.at(i, j)];
      ss_within += w * w;
      scale = std::max(scale, std::abs(a));
    }
  }
  // Constant maps leave only rounding noise in ss_total.
  const double noise = static_cast<double>(n) * std::pow(1e-12 * std::max(scale, 1e-300), 2);
  if (ss_total <= noise) return out;
  double ss_between = 0.0;
  for (std::size_t h = 0; h < groups; ++h) {
    const double dev = out.group_means[h] - mean;
    ss_between += static_cast<double>(out.group_sizes[h]) * dev * dev;
  }
  // Within-group residual guards the exact anchor: zero within-group spread is 1.
  if (ss_within <= noise) {
    out.score = 1.0;
    return out;
  }
  out.score = std::clamp(ss_between / ss_total, 0.0, 1.0);
  return out;
}

double specialization_score(const Eigen::MatrixXd& attn, const RelationGrouping& g) {
  return specialization_detail(attn, g).score;
}

std::size_t query_region_length(Objective mode, std::size_t d) {
  return mode == Objective::Causal ? d - 1 : d;
}

template <class T>
EpisodeAttention extract_query_attention(const ForwardTrace<T>& trace, std::size_t episode,
                                         const TokenStream& stream, std::size_t region) {
  if (stream.query_offset + region > trace.length) {
    throw ShapeError("extract_query_attention: query region exceeds the stream");
  }
  EpisodeAttention out;
  out.layers = trace.config.depth;
  out.heads = trace.config.heads;
  const auto off = static_cast<Eigen::Index>(stream.query_offset);
  const auto len = static_cast<Eigen::Index>(region);
  for (std::size_t l = 0; l < out.layers; ++l) {
    for (std::size_t h = 0; h < out.heads; ++h) {
      out.maps.push_back(trace.attention(l, episode, h).block(off, off, len, len).template cast<double>());
    }
  }
  return out;
}

template EpisodeAttention extract_query_attention<float>(const ForwardTrace<float>&, std::size_t,
                                                         const TokenStream&, std::size_t);
template EpisodeAttention extract_query_attention<double>(const ForwardTrace<double>&, std::size_t,
                                                          const TokenStream&, std::size_t);

LayerSpecialization layer_specialization(std::span<const EpisodeAttention> batch,
                                         const RelationGrouping& grouping, Aggregation aggregation,
                                         std::int64_t step, EvalCondition condition) {
  if (batch.empty()) throw ParameterError("layer_specialization: empty batch");
  const std::uint32_t layers = batch.front().layers;
  const std::uint32_t heads = batch.front().heads;
  LayerSpecialization out;
  for (std::uint32_t l = 0; l < layers; ++l) {
    for (std::uint32_t h = 0; h < heads; ++h) {
      SpecializationRecord rec;
      rec.step = step;
      rec.layer = l;
      rec.head = h;
      rec.condition = condition;
      rec.group_means.assign(grouping.groups(), 0.0);
      for (const auto& ep : batch) {
        if (ep.layers != layers || ep.heads != heads) {
          throw ShapeError("layer_specialization: inconsistent layer/head counts");
        }
        const auto detail = specialization_detail(ep.map(l, h), grouping);
        rec.score += detail.score;
        for (std::size_t g = 0; g < detail.group_means.size(); ++g) rec.group_means[g] += detail.group_means[g];
      }
      const auto n = static_cast<double>(batch.size());
      rec.score /= n;
      for (auto& m : rec.group_means) m /= n;
      rec.samples = batch.size();
      out.heads.push_back(std::move(rec));
    }
  }
  double total = 0.0;
  for (std::uint32_t l = 0; l < layers; ++l) {
    double agg = 0.0;
    for (std::uint32_t h = 0; h < heads; ++h) {
      const double s = out.heads[l * heads + h].score;
      agg = aggregation == Aggregation::Max ? std::max(agg, s) : agg + s;
      total += s;
    }
    out.per_layer.push_back(aggregation == Aggregation::Max ? agg : agg / heads);
  }
  out.overall = total / static_cast<double>(layers * heads);
  return out;
}

PCAResult pca(const Eigen::MatrixXd& hidden) {
  if (hidden.rows() < 2) throw ParameterError("pca: need at least 2 samples");
  PCAResult out;
  out.mean = hidden.colwise().mean().transpose();
  const Eigen::MatrixXd centered = hidden.rowwise() - out.mean.transpose();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(hidden.rows() - 1);
  const double trace = cov.trace();
  if (!(trace > 0.0)) throw DegenerateError("pca: all samples are identical");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const Eigen::VectorXd& values = solver.eigenvalues();  // ascending
  const Eigen::MatrixXd& vectors = solver.eigenvectors();
  const auto dim = values.size();
  out.components.resize(dim, dim);
  for (Eigen::Index c = 0; c < dim; ++c) {
    const Eigen::Index src = dim - 1 - c;
    out.components.row(c) = vectors.col(src).transpose();
    out.ratios.push_back(std::max(0.0, values(src)) / trace);
  }
  return out;
}

std::vector<Eigen::MatrixXd> average_head_maps(std::span<const EpisodeAttention> batch) {
  if (batch.empty()) throw ParameterError("average_head_maps: empty batch");
  std::vector<Eigen::MatrixXd> out = batch.front().maps;
  for (std::size_t e = 1; e < batch.size(); ++e) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += batch[e].maps[i];
  }
  for (auto& m : out) m /= static_cast<double>(batch.size());
  return out;
}

namespace {

Eigen::VectorXd flatten(const Eigen::MatrixXd& m, bool lower_triangle) {
  std::vector<double> v;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (!lower_triangle || j <= i) v.push_back(m(i, j));
    }
  }
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

HeadClustering cluster_heads(std::span<const Eigen::MatrixXd> maps, double threshold,
                             bool lower_triangle) {
  if (!(threshold > -1.0 && threshold < 1.0)) {
    throw ParameterError("cluster_heads: threshold must lie in (-1, 1)");
  }
  if (maps.size() < 2) throw ParameterError("cluster_heads: need at least 2 heads");
  const std::size_t n = maps.size();

  std::vector<Eigen::VectorXd> centered;
  std::vector<double> norms;
  for (const auto& m : maps) {
    if (m.rows() != maps.front().rows() || m.cols() != maps.front().cols()) {
      throw ShapeError("cluster_heads: maps must share one shape");
    }
    Eigen::VectorXd f = flatten(m, lower_triangle);
    f.array() -= f.mean();
    norms.push_back(f.norm());
    centered.push_back(std::move(f));
  }

  HeadClustering out;
  out.threshold = threshold;
  out.similarity = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double r = 0.0;
      if (norms[i] > 0.0 && norms[j] > 0.0) {
        r = std::clamp(centered[i].dot(centered[j]) / (norms[i] * norms[j]), -1.0, 1.0);
      }
      out.similarity(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r;
      out.similarity(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = r;
    }
  }

  std::vector<std::vector<std::size_t>> clusters;
  for (std::size_t i = 0; i < n; ++i) clusters.push_back({i});
  auto linkage = [&](const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    double sum = 0.0;
    for (auto i : a) {
      for (auto j : b) sum += out.similarity(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
    return sum / static_cast<double>(a.size() * b.size());
  };
  while (clusters.size() > 1) {
    double best = -2.0;
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      for (std::size_t j = i + 1; j < clusters.size(); ++j) {
        const double s = linkage(clusters[i], clusters[j]);
        if (s > best) {
          best = s;
          bi = i;
          bj = j;
        }
      }
    }
    if (!(best > threshold)) break;
    clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(), clusters[bj].end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
  }

  for (auto& c : clusters) std::sort(c.begin(), c.end());
  std::sort(clusters.begin(), clusters.end(),
            [](const auto& a, const auto& b) { return a.front() < b.front(); });
  out.assignment.assign(n, 0);
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    for (auto i : clusters[c]) out.assignment[i] = static_cast<std::uint32_t>(c);
  }
  return out;
}

std::vector<CurvePoint> specialization_curve(std::span<const std::int64_t> steps,
                                             const std::function<double(std::int64_t)>& score_at) {
  if (steps.size() < 2) throw ParameterError("specialization_curve: need at least 2 checkpoints");
  std::vector<std::int64_t> ordered(steps.begin(), steps.end());
  std::sort(ordered.begin(), ordered.end());
  std::vector<CurvePoint> out;
  out.reserve(ordered.size());
  for (auto s : ordered) out.push_back({s, score_at(s)});
  return out;
}

}  // namespace rhm

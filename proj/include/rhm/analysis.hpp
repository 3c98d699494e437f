#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rhm/model.hpp"
#include "rhm/tasks.hpp"

namespace rhm {

// Smallest l >= 0 with floor(i / s^l) == floor(j / s^l). Throws RangeError
// unless 0 <= i, j < s^L.
std::uint32_t lca_height(std::uint32_t s, std::uint32_t L, std::size_t i, std::size_t j);

// LCA heights for every ordered pair of analyzed query positions. In causal
// mode only pairs with key <= query take part.
struct RelationGrouping {
  std::uint32_t s = 2;
  std::uint32_t L = 1;
  std::size_t positions = 0;
  bool causal = false;
  std::vector<std::uint8_t> height;  // positions x positions, row = query

  static RelationGrouping build(std::uint32_t s, std::uint32_t L, std::size_t positions,
                                bool causal);

  std::uint32_t groups() const { return L + 1; }
  std::uint8_t at(std::size_t i, std::size_t j) const { return height[i * positions + j]; }
  bool included(std::size_t i, std::size_t j) const { return !causal || j <= i; }
};

struct SpecializationDetail {
  double score = 0.0;                // eta^2 in [0, 1]
  std::vector<double> group_means;   // per LCA height; 0 for empty groups
  std::vector<std::size_t> group_sizes;
};

// Correlation ratio eta^2 = between-group / total variance of the included
// attention weights, grouped by LCA height. 0 when the total variance is 0.
SpecializationDetail specialization_detail(const Eigen::MatrixXd& attn, const RelationGrouping& g);
double specialization_score(const Eigen::MatrixXd& attn, const RelationGrouping& g);

// Query-region attention maps of one episode: maps[layer * heads + head].
struct EpisodeAttention {
  std::uint32_t layers = 0;
  std::uint32_t heads = 0;
  std::vector<Eigen::MatrixXd> maps;

  const Eigen::MatrixXd& map(std::size_t layer, std::size_t head) const {
    return maps[layer * heads + head];
  }
};

// Number of analyzed query positions: d-1 (causal prefix) or d (masked, with
// the MASK slot).
std::size_t query_region_length(Objective mode, std::size_t d);

template <class T>
EpisodeAttention extract_query_attention(const ForwardTrace<T>& trace, std::size_t episode,
                                         const TokenStream& stream, std::size_t region);

enum class Aggregation { Mean, Max };

struct SpecializationRecord {
  std::int64_t step = 0;
  std::uint32_t layer = 0;
  std::uint32_t head = 0;
  EvalCondition condition = EvalCondition::Mem;
  double score = 0.0;
  std::vector<double> group_means;
  std::size_t samples = 0;
};

struct LayerSpecialization {
  std::vector<SpecializationRecord> heads;  // layer-major
  std::vector<double> per_layer;            // mean (or max) over heads
  double overall = 0.0;                     // mean over all layers and heads
};

// Per-head scores averaged over episodes. Throws ParameterError on an empty batch.
LayerSpecialization layer_specialization(std::span<const EpisodeAttention> batch,
                                         const RelationGrouping& grouping,
                                         Aggregation aggregation = Aggregation::Mean,
                                         std::int64_t step = 0,
                                         EvalCondition condition = EvalCondition::Mem);

struct PCAResult {
  Eigen::MatrixXd components;  // one unit vector per row, by decreasing variance
  std::vector<double> ratios;  // explained-variance ratios
  Eigen::VectorXd mean;
};

// PCA of the rows of `hidden`. Throws ParameterError for fewer than 2 rows and
// DegenerateError when the covariance is zero.
PCAResult pca(const Eigen::MatrixXd& hidden);

struct HeadClustering {
  Eigen::MatrixXd similarity;              // Pearson correlation, diagonal 1
  std::vector<std::uint32_t> assignment;   // cluster id per head, labelled by first member
  double threshold = 0.0;
};

// Episode-averaged map per (layer, head), in layer-major order.
std::vector<Eigen::MatrixXd> average_head_maps(std::span<const EpisodeAttention> batch);

// Average-linkage agglomerative clustering on Pearson correlation of the
// flattened maps; merges while some cluster pair's mean similarity exceeds
// `threshold`. With lower_triangle set, only entries j <= i are compared.
HeadClustering cluster_heads(std::span<const Eigen::MatrixXd> maps, double threshold,
                             bool lower_triangle = false);

struct CurvePoint {
  std::int64_t step;
  double score;
};

// Evaluates score_at for each step in increasing order. Needs >= 2 steps.
std::vector<CurvePoint> specialization_curve(std::span<const std::int64_t> steps,
                                             const std::function<double(std::int64_t)>& score_at);

}  // namespace rhm

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "mam/checkpoint.hpp"
#include "mam/matrix.hpp"
#include "mam/parallel.hpp"
#include "mam/tensor.hpp"

namespace mam {

/// Mean over the sequence axis of a flat [n, seq_len, d] buffer.
inline Matrix pool_sequence(std::span<const double> reps, std::size_t n, std::size_t seq_len, std::size_t d) {
  if (seq_len == 0) fail(ErrorCode::EmptySequence, "cannot pool an empty sequence");
  if (reps.size() != n * seq_len * d) fail(ErrorCode::ShapeError, "representation buffer does not match its shape");
  Matrix out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < seq_len; ++t) {
      const double* src = reps.data() + (i * seq_len + t) * d;
      for (std::size_t j = 0; j < d; ++j) out(i, j) += src[j];
    }
    for (std::size_t j = 0; j < d; ++j) out(i, j) /= static_cast<double>(seq_len);
  }
  return out;
}

inline Matrix pool_sequence(const Tensor& reps) {
  if (reps.rank() != 3) fail(ErrorCode::ShapeError, "pool_sequence expects [n, seq_len, d], got " + shape_string(reps.shape()));
  const auto values = reps.to_f64();
  return pool_sequence(values, reps.shape()[0], reps.shape()[1], reps.shape()[2]);
}

namespace detail {

inline void check_sample_sets(const Matrix& x, const Matrix& y) {
  if (x.rows != y.rows)
    fail(ErrorCode::SampleCountMismatch, std::to_string(x.rows) + " vs " + std::to_string(y.rows) + " samples");
  if (x.cols != y.cols)
    fail(ErrorCode::DimensionMismatch, std::to_string(x.cols) + " vs " + std::to_string(y.cols) + " dimensions");
}

inline double wasserstein_1d_sorted(std::vector<double>& a, std::vector<double>& b, double p) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double acc = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) acc += std::pow(std::abs(a[j] - b[j]), p);
  return std::pow(acc / static_cast<double>(a.size()), 1.0 / p);
}

}  // namespace detail

/// Sliced Wasserstein-p distance between the empirical distributions of the
/// rows of x and y. Directions are normalized Gaussian draws from `rng`; the
/// result is the plain mean of the per-direction 1-D distances.
inline double swd(const Matrix& x, const Matrix& y, std::size_t num_projections, double p, Rng& rng,
                  std::size_t threads = 1) {
  detail::check_sample_sets(x, y);
  if (x.rows < 2) fail(ErrorCode::TooFewSamples, "sliced Wasserstein needs at least 2 samples");
  if (num_projections < 1) fail(ErrorCode::BadSpec, "num_projections must be >= 1");
  if (!(p >= 1.0)) fail(ErrorCode::BadSpec, "order p must be >= 1");

  const std::size_t d = x.cols;
  Matrix directions(num_projections, d);
  for (std::size_t k = 0; k < num_projections; ++k) {
    double norm = 0.0;
    while (norm == 0.0) {
      norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        directions(k, j) = rng.normal();
        norm += directions(k, j) * directions(k, j);
      }
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < d; ++j) directions(k, j) /= norm;
  }

  std::vector<double> per_direction(num_projections);
  parallel_for(num_projections, threads, [&](std::size_t k) {
    const auto u = directions.row(k);
    std::vector<double> px(x.rows), py(y.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
      double sx = 0.0, sy = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        sx += x(i, j) * u[j];
        sy += y(i, j) * u[j];
      }
      px[i] = sx;
      py[i] = sy;
    }
    per_direction[k] = detail::wasserstein_1d_sorted(px, py, p);
  });
  double total = 0.0;
  for (double v : per_direction) total += v;
  return total / static_cast<double>(num_projections);
}

enum class Metric { Euclidean, InnerProduct, SWD };

inline std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::Euclidean: return "euclidean";
    case Metric::InnerProduct: return "inner";
    case Metric::SWD: return "swd";
  }
  return "?";
}

inline Metric parse_metric(std::string_view s) {
  if (s == "euclidean") return Metric::Euclidean;
  if (s == "inner" || s == "inner_product") return Metric::InnerProduct;
  if (s == "swd") return Metric::SWD;
  fail(ErrorCode::UnknownMetric, "unknown metric '" + std::string(s) + "' (expected euclidean, inner or swd)");
}

/// Inner product is a similarity (larger = closer); the other two are distances.
inline bool higher_is_more_similar(Metric m) { return m == Metric::InnerProduct; }

struct SwdParams {
  std::size_t num_projections = 128;
  double p = 2.0;
  std::uint64_t seed = 0;
};

/// Euclidean and inner product compare paired rows and average over samples.
/// SWD compares the two row sets as distributions; every call reseeds from
/// params.seed so all layers are scored against the same directions.
inline double layer_distance(const Matrix& src, const Matrix& tgt, Metric metric, const SwdParams& params,
                             std::size_t threads = 1) {
  detail::check_sample_sets(src, tgt);
  if (src.rows == 0) fail(ErrorCode::TooFewSamples, "no samples");
  switch (metric) {
    case Metric::Euclidean: {
      double acc = 0.0;
      for (std::size_t i = 0; i < src.rows; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < src.cols; ++j) {
          const double diff = src(i, j) - tgt(i, j);
          sq += diff * diff;
        }
        acc += std::sqrt(sq);
      }
      return acc / static_cast<double>(src.rows);
    }
    case Metric::InnerProduct: {
      double acc = 0.0;
      for (std::size_t i = 0; i < src.rows; ++i)
        for (std::size_t j = 0; j < src.cols; ++j) acc += src(i, j) * tgt(i, j);
      return acc / static_cast<double>(src.rows);
    }
    case Metric::SWD: {
      Rng rng(params.seed);
      return swd(src, tgt, params.num_projections, params.p, rng, threads);
    }
  }
  fail(ErrorCode::UnknownMetric, "unhandled metric");
}

/// Pooled per-layer representations: per_layer[i] is n_samples x d.
struct RepresentationSet {
  std::vector<Matrix> per_layer;

  std::size_t num_layers() const { return per_layer.size(); }

  void validate() const {
    for (const auto& m : per_layer)
      if (!m.same_shape(per_layer.front()))
        fail(ErrorCode::MisalignedSets, "layers of a representation set differ in sample count or width");
  }
};

/// Reads tensors "layer.{i}" for i = 0.. until the first gap. Rank-3 tensors
/// are pooled over the sequence axis and require metadata pooled = "false".
inline RepresentationSet representations_from_checkpoint(const Checkpoint& c) {
  RepresentationSet set;
  const auto pooled = c.metadata().find("pooled");
  const bool unpooled = pooled != c.metadata().end() && pooled->second == "false";
  for (std::size_t i = 0;; ++i) {
    const std::string name = "layer." + std::to_string(i);
    if (!c.contains(name)) break;
    const auto& t = c.at(name);
    if (t.rank() == 2 && !unpooled) set.per_layer.push_back(Matrix::from_tensor(t));
    else if (t.rank() == 3 && unpooled) set.per_layer.push_back(pool_sequence(t));
    else fail(ErrorCode::ShapeError, "representation '" + name + "' has shape " + shape_string(t.shape()) +
                                         (unpooled ? " but pooled=false needs [n, seq_len, d]" : ", expected [n, d]"));
  }
  if (set.per_layer.empty()) fail(ErrorCode::NoLayersFound, "no tensors named layer.0, layer.1, ...");
  set.validate();
  return set;
}

inline Checkpoint representations_to_checkpoint(const RepresentationSet& set, DType dtype = DType::F64) {
  Checkpoint c;
  for (std::size_t i = 0; i < set.per_layer.size(); ++i)
    c.add("layer." + std::to_string(i), set.per_layer[i].to_tensor(dtype));
  c.metadata()["pooled"] = "true";
  return c;
}

struct LayerSelection {
  Metric metric = Metric::SWD;
  std::size_t k = 0;
  SwdParams params;
  std::vector<double> scores;
  std::vector<std::size_t> order;     // most similar first
  std::vector<std::size_t> selected;  // first k of order

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["metric"] = std::string(metric_name(metric));
    j["k"] = k;
    j["params"] = {{"num_projections", params.num_projections}, {"p", params.p}, {"seed", params.seed}};
    j["scores"] = scores;
    j["order"] = order;
    j["selected"] = selected;
    j["score_kind"] = higher_is_more_similar(metric) ? "similarity" : "distance";
    if (metric == Metric::SWD) j["swd_scope"] = "per-dataset: rows of all samples form each empirical distribution";
    return j;
  }
};

/// Orders layers most-similar-first (ascending distance, descending inner
/// product), ties to the lower index.
inline std::vector<std::size_t> rank_scores(const std::vector<double>& scores, Metric metric) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const bool desc = higher_is_more_similar(metric);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return desc ? scores[a] > scores[b] : scores[a] < scores[b];
  });
  return order;
}

inline LayerSelection rank_and_select(const RepresentationSet& src, const RepresentationSet& tgt, Metric metric,
                                      std::size_t k, const SwdParams& params, std::size_t threads = 1) {
  if (src.num_layers() != tgt.num_layers())
    fail(ErrorCode::MisalignedSets, std::to_string(src.num_layers()) + " vs " + std::to_string(tgt.num_layers()) +
                                        " layers");
  src.validate();
  tgt.validate();
  const std::size_t num_layers = src.num_layers();
  if (k < 1 || k > num_layers)
    fail(ErrorCode::KOutOfRange, "k=" + std::to_string(k) + " outside 1.." + std::to_string(num_layers));
  for (std::size_t i = 0; i < num_layers; ++i)
    if (!src.per_layer[i].same_shape(tgt.per_layer[i]))
      fail(ErrorCode::MisalignedSets, "layer " + std::to_string(i) + " source and target shapes differ");

  LayerSelection sel;
  sel.metric = metric;
  sel.k = k;
  sel.params = params;
  sel.scores.resize(num_layers);
  parallel_for(num_layers, threads, [&](std::size_t i) {
    sel.scores[i] = layer_distance(src.per_layer[i], tgt.per_layer[i], metric, params);
  });
  sel.order = rank_scores(sel.scores, metric);
  sel.selected.assign(sel.order.begin(), sel.order.begin() + static_cast<std::ptrdiff_t>(k));
  return sel;
}

}  // namespace mam

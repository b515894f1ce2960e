// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "mam/checkpoint.hpp"
#include "mam/parallel.hpp"
#include "mam/tensor.hpp"
#include "mam/version.hpp"

namespace mam {

/// A checkpoint together with its attention skeleton.
struct ModelRef {
  const Checkpoint& checkpoint;
  const ModelView& view;
};

struct UniformMode {
  double lambda = 0.0;
};

/// Layers outside `layers` keep lambda = 0.
struct SubsetMode {
  double lambda = 0.0;
  std::set<std::size_t> layers;
};

struct PerLayerMode {
  std::vector<double> lambdas;
};

struct MergeSpec {
  std::variant<UniformMode, SubsetMode, PerLayerMode> mode = UniformMode{};
  bool include_bias = false;

  std::string mode_name() const {
    switch (mode.index()) {
      case 0: return "uniform";
      case 1: return "subset";
      default: return "per_layer";
    }
  }

  /// Per-layer interpolation factors for a model with `num_layers` layers.
  std::vector<double> effective_lambdas(std::size_t num_layers) const {
    std::vector<double> out(num_layers, 0.0);
    if (const auto* u = std::get_if<UniformMode>(&mode)) {
      check_lambda(u->lambda);
      std::fill(out.begin(), out.end(), u->lambda);
    } else if (const auto* s = std::get_if<SubsetMode>(&mode)) {
      check_lambda(s->lambda);
      for (auto i : s->layers) {
        if (i >= num_layers)
          fail(ErrorCode::BadSpec, "layer " + std::to_string(i) + " outside 0.." + std::to_string(num_layers - 1));
        out[i] = s->lambda;
      }
    } else {
      const auto& p = std::get<PerLayerMode>(mode);
      if (p.lambdas.size() != num_layers)
        fail(ErrorCode::BadSpec, "per-layer lambda vector has " + std::to_string(p.lambdas.size()) +
                                     " entries for " + std::to_string(num_layers) + " layers");
      for (auto l : p.lambdas) check_lambda(l);
      out = p.lambdas;
    }
    return out;
  }

  nlohmann::json lambda_json() const {
    if (const auto* u = std::get_if<UniformMode>(&mode)) return u->lambda;
    if (const auto* s = std::get_if<SubsetMode>(&mode)) return s->lambda;
    return std::get<PerLayerMode>(mode).lambdas;
  }
};

enum class NoiseKind { MatchSource, MatchTarget, StandardNormal };

inline std::string_view noise_kind_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::MatchSource: return "source";
    case NoiseKind::MatchTarget: return "target";
    case NoiseKind::StandardNormal: return "std";
  }
  return "?";
}

struct NoiseSpec {
  NoiseKind kind = NoiseKind::StandardNormal;
  std::uint64_t seed = 0;
};

namespace detail {

inline void require_compatible(const ModelView& source, const ModelView& target) {
  try {
    validate_compatibility(source, target);
  } catch (const Error& e) {
    fail(ErrorCode::IncompatibleModels, e.what());
  }
}

}  // namespace detail

/// Interpolates attention Q/K/V (and optionally biases) of `source` into a copy
/// of `target`. Layers with an effective lambda of 0 are left untouched, so
/// everything outside the merged set is bit-identical to the target.
inline Checkpoint merge(const ModelRef& source, const ModelRef& target, const MergeSpec& spec,
                        std::size_t threads = 1) {
  detail::require_compatible(source.view, target.view);
  if (spec.include_bias && !(source.view.has_bias() && target.view.has_bias()))
    fail(ErrorCode::BadSpec, "--include-bias needs bias patterns resolved in both models");
  const auto lambdas = spec.effective_lambdas(target.view.num_layers());

  struct Job {
    std::string target_name;
    const Tensor* source;
    const Tensor* target;
    double lambda;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    if (lambdas[i] == 0.0) continue;
    const auto src = source.view.layers[i].tensors(spec.include_bias);
    const auto tgt = target.view.layers[i].tensors(spec.include_bias);
    for (std::size_t r = 0; r < tgt.size(); ++r)
      jobs.push_back({tgt[r].second, &source.checkpoint.at(src[r].second), &target.checkpoint.at(tgt[r].second),
                      lambdas[i]});
  }
  std::vector<Tensor> results(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t j) { results[j] = lerp(*jobs[j].source, *jobs[j].target, jobs[j].lambda); });

  Checkpoint out = target.checkpoint;
  for (std::size_t j = 0; j < jobs.size(); ++j) out.replace(jobs[j].target_name, std::move(results[j]));

  std::vector<std::size_t> merged_layers;
  for (std::size_t i = 0; i < lambdas.size(); ++i)
    if (lambdas[i] != 0.0) merged_layers.push_back(i);

  auto& md = out.metadata();
  md["mam.mode"] = spec.mode_name();
  md["mam.lambda"] = spec.lambda_json().dump();
  md["mam.layers"] = nlohmann::json(merged_layers).dump();
  md["mam.include_bias"] = spec.include_bias ? "true" : "false";
  md["mam.version"] = kVersion;
  md["mam.source_digest"] = checkpoint_digest(source.checkpoint);
  md["mam.target_digest"] = checkpoint_digest(target.checkpoint);
  const auto& smd = source.checkpoint.metadata();
  if (auto it = smd.find("mam.noise_kind"); it != smd.end()) {
    md["mam.noise_kind"] = it->second;
    for (const char* key : {"mam.seed", "mam.noise_moments"})
      if (auto jt = smd.find(key); jt != smd.end()) md[key] = jt->second;
  } else {
    md["mam.noise_kind"] = "none";
  }
  return out;
}

/// Builds a synthetic merge source whose attention tensors are Gaussian noise.
/// Moments are matched per tensor to `reference` (MatchSource) or to `target`
/// (MatchTarget); StandardNormal ignores both. Samples are drawn from a single
/// stream in layer order, roles Q, K, V, then biases.
inline Checkpoint make_noise_source(const ModelRef& target, const std::optional<ModelRef>& reference,
                                    const NoiseSpec& noise) {
  if (noise.kind == NoiseKind::MatchSource) {
    if (!reference) fail(ErrorCode::MissingReference, "noise matched to the source needs a source checkpoint");
    detail::require_compatible(reference->view, target.view);
  }
  Rng rng(noise.seed);
  Checkpoint out = target.checkpoint;
  for (std::size_t i = 0; i < target.view.num_layers(); ++i) {
    const auto tgt = target.view.layers[i].tensors(true);
    for (std::size_t r = 0; r < tgt.size(); ++r) {
      const Tensor& like = target.checkpoint.at(tgt[r].second);
      TensorStats stats{0.0, 1.0};
      if (noise.kind == NoiseKind::MatchTarget) {
        stats = tensor_stats(like);
      } else if (noise.kind == NoiseKind::MatchSource) {
        const auto src = reference->view.layers[i].tensors(true);
        if (r >= src.size())
          fail(ErrorCode::IncompatibleModels, "reference has no " + std::string(role_name(tgt[r].first)) +
                                                  " tensor at layer " + std::to_string(i));
        stats = tensor_stats(reference->checkpoint.at(src.at(r).second));
      }
      out.replace(tgt[r].second, sample_gaussian(like.shape(), stats.mean, stats.variance, rng, like.dtype()));
    }
  }
  auto& md = out.metadata();
  md["mam.noise_kind"] = std::string(noise_kind_name(noise.kind));
  md["mam.seed"] = std::to_string(noise.seed);
  md["mam.noise_moments"] = noise.kind == NoiseKind::StandardNormal ? "fixed N(0,1)" : "per-tensor, population variance";
  return out;
}

}  // namespace mam

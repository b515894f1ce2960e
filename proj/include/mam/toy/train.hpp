// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mam/checkpoint.hpp"
#include "mam/error.hpp"
#include "mam/merge.hpp"
#include "mam/tensor.hpp"
#include "mam/toy/model.hpp"
#include "mam/toy/task.hpp"

namespace mam::toy {

enum class OptimizerKind { SgdMomentum, Adam };

inline std::string_view optimizer_name(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd_momentum"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd" || s == "sgd_momentum") return OptimizerKind::SgdMomentum;
  if (s == "adam") return OptimizerKind::Adam;
  fail(ErrorCode::BadSpec, "unknown optimizer '" + std::string(s) + "' (expected sgd or adam)");
}

/// Which target weights L-MAM fine-tunes alongside the gates.
enum class LmamScope { Full, AttentionOnly };

struct TrainHyper {
  double lr = 0.05;
  std::size_t epochs = 10;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::SgdMomentum;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda_lr = 0.5;
  LmamScope scope = LmamScope::Full;

  void validate() const {
    if (!(lr >= 0.0) || !(lambda_lr >= 0.0)) fail(ErrorCode::BadSpec, "learning rates must be >= 0");
    if (batch == 0) fail(ErrorCode::BadSpec, "batch size must be positive");
  }

  nlohmann::json to_json() const {
    return {{"lr", lr}, {"epochs", epochs}, {"batch", batch}, {"seed", seed},
            {"optimizer", std::string(optimizer_name(optimizer))}, {"momentum", momentum}, {"beta1", beta1},
            {"beta2", beta2}, {"lambda_lr", lambda_lr},
            {"lmam_scope", scope == LmamScope::Full ? "full" : "attention_only"}};
  }
};

/// SGD with heavy-ball momentum (v = mu v + g; w -= lr v) or Adam, over a
/// fixed list of parameter buffers.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, const TrainHyper& h) : kind_(kind), lr_(lr), hyper_(h) {}

  void step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads,
            const std::vector<bool>& trainable) {
    if (first_.empty()) {
      for (const auto* p : params) first_.emplace_back(p->data.size(), 0.0);
      if (kind_ == OptimizerKind::Adam)
        for (const auto* p : params) second_.emplace_back(p->data.size(), 0.0);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      if (!trainable[p]) continue;
      auto& w = params[p]->data;
      const auto& g = grads[p]->data;
      auto& m = first_[p];
      if (kind_ == OptimizerKind::SgdMomentum) {
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = hyper_.momentum * m[i] + g[i];
          w[i] -= lr_ * m[i];
        }
      } else {
        auto& v = second_[p];
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = hyper_.beta1 * m[i] + (1.0 - hyper_.beta1) * g[i];
          v[i] = hyper_.beta2 * v[i] + (1.0 - hyper_.beta2) * g[i] * g[i];
          w[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + hyper_.adam_eps);
        }
      }
    }
  }

 private:
  OptimizerKind kind_;
  double lr_;
  TrainHyper hyper_;
  std::vector<std::vector<double>> first_, second_;
  std::size_t t_ = 0;
};

struct EpochReport {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double dev_error = 0.0;
  std::vector<double> lambdas;

  nlohmann::json to_json() const {
    nlohmann::json j{{"epoch", epoch}, {"step", step}, {"loss", loss}, {"dev_error", dev_error}};
    if (!lambdas.empty()) j["lambda"] = lambdas;
    return j;
  }
};

struct TrainResult {
  ToyModel model;
  double best_dev_error = 1.0;
  std::size_t best_epoch = 0;  // 0 = the initial weights
  std::vector<EpochReport> history;
};

namespace detail {

inline std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

inline void check_finite_loss(double loss) {
  if (!std::isfinite(loss)) fail(ErrorCode::DivergedLoss, "training loss became non-finite");
}

inline std::vector<const Matrix*> const_params(ToyModel& m) {
  std::vector<const Matrix*> out;
  for (auto* p : m.params()) out.push_back(p);
  return out;
}

/// Shared epoch loop. `step(batch)` returns the batch loss after applying an
/// update; `evaluate_dev()` scores the current state and `snapshot()` keeps
/// it when that score is a new strict minimum. The initial state is epoch 0.
template <typename Step, typename Dev, typename Snapshot, typename Lambdas>
void run_epochs(const SyntheticTask& task, const std::vector<Example>& train, const TrainHyper& hyper, Step&& step,
                Dev&& evaluate_dev, Snapshot&& snapshot, Lambdas&& lambdas, double& best_dev,
                std::size_t& best_epoch, std::vector<EpochReport>& history) {
  (void)task;
  if (train.empty()) fail(ErrorCode::EmptySplit, "training split is empty");
  best_dev = evaluate_dev();
  best_epoch = 0;
  snapshot();
  Rng rng(hyper.seed);
  std::size_t global_step = 0;
  std::vector<Example> batch;
  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    const auto order = shuffled(train.size(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + hyper.batch); ++i) batch.push_back(train[order[i]]);
      double loss;
      try {
        loss = step(batch);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::NonFiniteActivation) fail(ErrorCode::DivergedLoss, e.what());
        throw;
      }
      check_finite_loss(loss);
      loss_sum += loss;
      ++batches;
      ++global_step;
    }
    const double dev = evaluate_dev();
    history.push_back({epoch, global_step, loss_sum / static_cast<double>(batches), dev, lambdas()});
    if (dev < best_dev) {
      best_dev = dev;
      best_epoch = epoch;
      snapshot();
    }
  }
}

}  // namespace detail

/// Plain fine-tuning on task.train (or `train_split` when given), keeping the
/// weights with the lowest dev error seen, including the starting weights.
inline TrainResult train_finetune(const ToyModel& initial, const SyntheticTask& task, const TrainHyper& hyper,
                                  const std::vector<Example>* train_split = nullptr,
                                  const std::vector<Example>* dev_split = nullptr) {
  hyper.validate();
  const auto& train = train_split ? *train_split : task.train;
  const auto& dev = dev_split ? *dev_split : task.dev;
  TrainResult result;
  if (hyper.epochs == 0) {
    result.model = initial;
    result.best_dev_error = evaluate(initial, dev);
    return result;
  }
  ToyModel model = initial;
  Optimizer opt(hyper.optimizer, hyper.lr, hyper);
  const std::vector<bool> trainable(model.params().size(), true);
  detail::run_epochs(
      task, train, hyper,
      [&](const std::vector<Example>& batch) {
        auto lg = loss_and_grad(model, batch);
        detail::check_finite_loss(lg.loss);
        opt.step(model.params(), detail::const_params(lg.grads), trainable);
        return lg.loss;
      },
      [&] { return evaluate(model, dev); }, [&] { result.model = model; }, [] { return std::vector<double>{}; },
      result.best_dev_error, result.best_epoch, result.history);
  return result;
}

// ---------------------------------------------------------------------------
// Learnable attention merging

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline constexpr double kGateLogitBound = 30.0;

/// Per-layer gates: lambda_i = sigmoid(theta_i).
struct LMamState {
  std::vector<double> theta;

  static LMamState from_lambda(std::size_t num_layers, double lambda_init) {
    if (!(lambda_init > 0.0 && lambda_init < 1.0))
      fail(ErrorCode::LambdaOutOfRange, "lambda_init must lie strictly inside (0,1)");
    return {std::vector<double>(num_layers, logit(lambda_init))};
  }

  std::vector<double> lambdas() const {
    std::vector<double> out(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) out[i] = sigmoid(theta[i]);
    return out;
  }
};

namespace detail {

inline Matrix lerp_matrix(const Matrix& s, const Matrix& t, double lambda) {
  if (lambda == 0.0) return t;
  if (lambda == 1.0) return s;
  Matrix out(t.rows, t.cols);
  const double rest = 1.0 - lambda;
  for (std::size_t i = 0; i < t.data.size(); ++i) out.data[i] = lambda * s.data[i] + rest * t.data[i];
  return out;
}

inline void require_toy_compatible(const ToyModel& source, const ToyModel& target) {
  const auto cfg = LayerPatternConfig::toy();
  const auto sc = to_checkpoint(source);
  const auto tc = to_checkpoint(target);
  try {
    validate_compatibility(build_model_view(sc, cfg), build_model_view(tc, cfg));
  } catch (const Error& e) {
    fail(ErrorCode::IncompatibleModels, e.what());
  }
}

}  // namespace detail

/// Target architecture with Q/K/V of layer i replaced by
/// lambdas[i] * source + (1 - lambdas[i]) * target.
inline ToyModel merged_model(const ToyModel& source, const ToyModel& target, std::span<const double> lambdas) {
  if (lambdas.size() != target.layers.size()) fail(ErrorCode::BadSpec, "one lambda per layer required");
  ToyModel out = target;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    out.layers[i].wq = detail::lerp_matrix(source.layers[i].wq, target.layers[i].wq, lambdas[i]);
    out.layers[i].wk = detail::lerp_matrix(source.layers[i].wk, target.layers[i].wk, lambdas[i]);
    out.layers[i].wv = detail::lerp_matrix(source.layers[i].wv, target.layers[i].wv, lambdas[i]);
  }
  return out;
}

struct LmamGradients {
  double loss = 0.0;
  ToyModel target_grads;       // d loss / d target weights
  std::vector<double> dtheta;  // d loss / d theta_i
};

/// Gradients of the batch loss of merged_model(source, target, sigmoid(theta))
/// with respect to the target weights and the gate logits. The source is a
/// constant. For r in {Q, K, V}:
///   dL/dtheta_i = sigmoid'(theta_i) * sum_r <dL/dW_merged, W_s - W_t>
///   dL/dW_t     = (1 - lambda_i) * dL/dW_merged
inline LmamGradients lmam_gradients(const ToyModel& source, const ToyModel& target, const LMamState& state,
                                    std::span<const Example> batch) {
  const auto lambdas = state.lambdas();
  const ToyModel merged = merged_model(source, target, lambdas);
  auto lg = loss_and_grad(merged, batch);
  LmamGradients out{lg.loss, std::move(lg.grads), std::vector<double>(lambdas.size(), 0.0)};
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    const double lam = lambdas[i];
    const double dsig = lam * (1.0 - lam);
    auto& g = out.target_grads.layers[i];
    const auto& s = source.layers[i];
    const auto& t = target.layers[i];
    double contraction = 0.0;
    for (auto [gm, sm, tm] : {std::tuple{&g.wq, &s.wq, &t.wq}, std::tuple{&g.wk, &s.wk, &t.wk},
                              std::tuple{&g.wv, &s.wv, &t.wv}}) {
      for (std::size_t k = 0; k < gm->data.size(); ++k) contraction += gm->data[k] * (sm->data[k] - tm->data[k]);
      if (lam != 0.0)
        for (auto& x : gm->data) x *= 1.0 - lam;
    }
    out.dtheta[i] = dsig * contraction;
  }
  return out;
}

struct LmamResult {
  ToyModel target;  // fine-tuned target weights
  ToyModel merged;  // target with learned gates applied; what gets evaluated
  LMamState state;
  std::vector<double> lambdas;
  double best_dev_error = 1.0;
  std::size_t best_epoch = 0;
  std::vector<EpochReport> history;
};

/// Fine-tunes the target and the per-layer gates together; the source never
/// changes. Keeps the state with the lowest dev error of the merged model.
inline LmamResult train_lmam(const ToyModel& source, const ToyModel& target, const SyntheticTask& task,
                             const TrainHyper& hyper, const LMamState& initial_state) {
  hyper.validate();
  detail::require_toy_compatible(source, target);
  if (initial_state.theta.size() != target.layers.size())
    fail(ErrorCode::BadSpec, "gate vector length does not match the layer count");
  for (double th : initial_state.theta)
    if (std::isnan(th)) fail(ErrorCode::BadSpec, "gate logits must not be NaN");

  ToyModel model = target;
  LMamState state = initial_state;
  Matrix theta(1, state.theta.size(), state.theta);
  Optimizer opt(hyper.optimizer, hyper.lr, hyper);
  Optimizer gate_opt(hyper.optimizer, hyper.lambda_lr, hyper);
  std::vector<bool> trainable(model.params().size(), true);
  if (hyper.scope == LmamScope::AttentionOnly) {
    const auto names = model.names();
    for (std::size_t p = 0; p < names.size(); ++p) trainable[p] = names[p].find(".attn.") != std::string::npos;
  }
  const std::vector<bool> gate_trainable{true};

  LmamResult result;
  if (hyper.epochs == 0) {
    result.target = model;
    result.state = state;
    result.lambdas = state.lambdas();
    result.merged = merged_model(source, model, result.lambdas);
    result.best_dev_error = evaluate(result.merged, task.dev);
    return result;
  }
  auto current_lambdas = [&] { return LMamState{theta.data}.lambdas(); };
  detail::run_epochs(
      task, task.train, hyper,
      [&](const std::vector<Example>& batch) {
        auto g = lmam_gradients(source, model, LMamState{theta.data}, batch);
        detail::check_finite_loss(g.loss);
        opt.step(model.params(), detail::const_params(g.target_grads), trainable);
        Matrix dtheta(1, g.dtheta.size(), g.dtheta);
        const auto before = theta.data;
        gate_opt.step({&theta}, {&dtheta}, gate_trainable);
        // sigmoid rounds to exactly 0 or 1 past |theta| ~ 37; updates stop at the bound,
        // a starting value outside it is left alone
        for (std::size_t i = 0; i < before.size(); ++i)
          theta.data[i] = std::clamp(theta.data[i], std::min(before[i], -kGateLogitBound),
                                     std::max(before[i], kGateLogitBound));
        return g.loss;
      },
      [&] { return evaluate(merged_model(source, model, current_lambdas()), task.dev); },
      [&] {
        result.target = model;
        result.state = LMamState{theta.data};
      },
      current_lambdas, result.best_dev_error, result.best_epoch, result.history);
  result.lambdas = result.state.lambdas();
  result.merged = merged_model(source, result.target, result.lambdas);
  return result;
}

inline LmamResult train_lmam(const ToyModel& source, const ToyModel& target, const SyntheticTask& task,
                             const TrainHyper& hyper, double lambda_init) {
  return train_lmam(source, target, task, hyper, LMamState::from_lambda(target.layers.size(), lambda_init));
}

// ---------------------------------------------------------------------------
// Dev-set interpolation sweep

struct GridSearchResult {
  double best_lambda = 0.0;
  double best_error = 0.0;
  std::vector<std::pair<double, double>> table;  // (lambda, error) in grid order

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& [l, e] : table) rows.push_back({{"lambda", l}, {"error", e}});
    return {{"best_lambda", best_lambda}, {"best_error", best_error}, {"table", rows}};
  }
};

/// argmin over the grid of eval(lambda); ties go to the smallest lambda.
inline GridSearchResult grid_search_lambda(std::span<const double> grid, const std::function<double(double)>& eval) {
  if (grid.empty()) fail(ErrorCode::EmptyGrid, "lambda grid is empty");
  for (double l : grid) check_lambda(l);
  GridSearchResult out;
  bool first = true;
  for (double l : grid) {
    const double e = eval(l);
    out.table.emplace_back(l, e);
    if (first || e < out.best_error || (e == out.best_error && l < out.best_lambda)) {
      out.best_lambda = l;
      out.best_error = e;
      first = false;
    }
  }
  return out;
}

/// Sweeps uniform merges of two checkpoints through the merge engine.
inline GridSearchResult grid_search_lambda(const ModelRef& source, const ModelRef& target, std::span<const double> grid,
                                           const std::function<double(const Checkpoint&)>& eval) {
  return grid_search_lambda(grid, [&](double l) {
    MergeSpec spec;
    spec.mode = UniformMode{l};
    return eval(merge(source, target, spec));
  });
}

}  // namespace mam::toy

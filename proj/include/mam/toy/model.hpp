// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mam/checkpoint.hpp"
#include "mam/digest.hpp"
#include "mam/matrix.hpp"
#include "mam/tensor.hpp"

// Pre-norm transformer encoder for sequence classification with hand-written
// reverse mode. Weights follow the y = x W^T convention of the checkpoints
// this library merges, so W_Q is [out, in].

namespace mam::toy {

struct ToyConfig {
  std::size_t num_layers = 2;
  std::size_t hidden = 16;
  std::size_t heads = 2;
  std::size_t ffn = 32;
  std::size_t vocab = 16;
  std::size_t num_classes = 4;
  std::size_t max_seq_len = 16;

  void validate() const {
    if (!num_layers || !hidden || !heads || !ffn || !vocab || !num_classes || !max_seq_len)
      fail(ErrorCode::BadSpec, "toy config sizes must all be positive");
    if (hidden % heads != 0) fail(ErrorCode::BadSpec, "hidden size must be divisible by the head count");
  }

  std::size_t head_dim() const { return hidden / heads; }

  nlohmann::json to_json() const {
    return {{"num_layers", num_layers}, {"hidden", hidden}, {"heads", heads}, {"ffn", ffn},
            {"vocab", vocab}, {"num_classes", num_classes}, {"max_seq_len", max_seq_len}};
  }

  static ToyConfig from_json(const nlohmann::json& j) {
    ToyConfig c;
    try {
      c.num_layers = j.at("num_layers").get<std::size_t>();
      c.hidden = j.at("hidden").get<std::size_t>();
      c.heads = j.at("heads").get<std::size_t>();
      c.ffn = j.at("ffn").get<std::size_t>();
      c.vocab = j.at("vocab").get<std::size_t>();
      c.num_classes = j.at("num_classes").get<std::size_t>();
      c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::BadSpec, std::string("bad toy config: ") + e.what());
    }
    c.validate();
    return c;
  }

  friend bool operator==(const ToyConfig&, const ToyConfig&) = default;
};

struct ToyLayer {
  Matrix wq, wk, wv, wo;        // hidden x hidden
  Matrix ln1_scale, ln1_shift;  // 1 x hidden
  Matrix ln2_scale, ln2_shift;
  Matrix w1;  // ffn x hidden
  Matrix w2;  // hidden x ffn

  friend bool operator==(const ToyLayer&, const ToyLayer&) = default;
};

struct ToyModel {
  ToyConfig config;
  Matrix embed;  // vocab x hidden
  std::vector<ToyLayer> layers;
  Matrix head;  // num_classes x hidden

  static ToyModel zeros(const ToyConfig& cfg) {
    cfg.validate();
    ToyModel m;
    m.config = cfg;
    const auto d = cfg.hidden;
    m.embed = Matrix(cfg.vocab, d);
    m.layers.resize(cfg.num_layers);
    for (auto& l : m.layers) {
      l.wq = l.wk = l.wv = l.wo = Matrix(d, d);
      l.ln1_scale = l.ln1_shift = l.ln2_scale = l.ln2_shift = Matrix(1, d);
      l.w1 = Matrix(cfg.ffn, d);
      l.w2 = Matrix(d, cfg.ffn);
    }
    m.head = Matrix(cfg.num_classes, d);
    return m;
  }

  /// Gaussian init scaled by 1/sqrt(fan_in); layernorm starts at identity.
  static ToyModel init(const ToyConfig& cfg, std::uint64_t seed) {
    ToyModel m = zeros(cfg);
    Rng rng(seed);
    auto fill = [&](Matrix& w, double sd) {
      for (auto& x : w.data) x = sd * rng.normal();
    };
    fill(m.embed, 1.0);
    const double sd_d = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    for (auto& l : m.layers) {
      fill(l.wq, sd_d);
      fill(l.wk, sd_d);
      fill(l.wv, sd_d);
      fill(l.wo, sd_d);
      std::fill(l.ln1_scale.data.begin(), l.ln1_scale.data.end(), 1.0);
      std::fill(l.ln2_scale.data.begin(), l.ln2_scale.data.end(), 1.0);
      fill(l.w1, sd_d);
      fill(l.w2, 1.0 / std::sqrt(static_cast<double>(cfg.ffn)));
    }
    fill(m.head, sd_d);
    return m;
  }

  /// Every parameter matrix in a fixed order; names() matches it index for index.
  std::vector<Matrix*> params() {
    std::vector<Matrix*> out{&embed};
    for (auto& l : layers)
      for (Matrix* p : {&l.wq, &l.wk, &l.wv, &l.wo, &l.ln1_scale, &l.ln1_shift, &l.ln2_scale, &l.ln2_shift, &l.w1, &l.w2})
        out.push_back(p);
    out.push_back(&head);
    return out;
  }

  std::vector<const Matrix*> params() const {
    std::vector<const Matrix*> out;
    for (Matrix* p : const_cast<ToyModel*>(this)->params()) out.push_back(p);
    return out;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out{"embed.weight"};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layer." + std::to_string(i) + ".";
      for (const char* s : {"attn.q.weight", "attn.k.weight", "attn.v.weight", "attn.o.weight", "ln1.scale",
                            "ln1.shift", "ln2.scale", "ln2.shift", "ffn.w1", "ffn.w2"})
        out.push_back(p + s);
    }
    out.push_back("head.weight");
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : params()) n += p->data.size();
    return n;
  }

  std::uint64_t fingerprint() const {
    Fnv1a64 h;
    for (const auto* p : params()) h.update(std::as_bytes(std::span(p->data)));
    return h.value();
  }

  friend bool operator==(const ToyModel&, const ToyModel&) = default;
};

/// Serializes under the layer.{i}.attn.{q,k,v,o}.weight naming, F64, with the
/// config in metadata key "toy.config". Layernorm parameters are rank 1.
inline Checkpoint to_checkpoint(const ToyModel& m) {
  Checkpoint c;
  const auto names = m.names();
  const auto params = m.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& p = *params[i];
    Shape shape = p.rows == 1 && names[i].find(".ln") != std::string::npos ? Shape{p.cols} : Shape{p.rows, p.cols};
    c.add(names[i], Tensor::from_values(DType::F64, shape, p.data));
  }
  c.metadata()["toy.config"] = m.config.to_json().dump();
  return c;
}

inline ToyModel from_checkpoint(const Checkpoint& c, std::optional<ToyConfig> config = std::nullopt) {
  if (!config) {
    auto it = c.metadata().find("toy.config");
    if (it == c.metadata().end()) fail(ErrorCode::BadSpec, "checkpoint has no toy.config metadata");
    try {
      config = ToyConfig::from_json(nlohmann::json::parse(it->second));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::BadSpec, std::string("toy.config is not valid JSON: ") + e.what());
    }
  }
  ToyModel m = ToyModel::zeros(*config);
  const auto names = m.names();
  auto params = m.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!c.contains(names[i])) fail(ErrorCode::BadSpec, "toy checkpoint lacks '" + names[i] + "'");
    const Tensor& t = c.at(names[i]);
    if (t.numel() != params[i]->data.size() || t.shape().back() != params[i]->cols)
      fail(ErrorCode::ShapeError, "'" + names[i] + "' has shape " + shape_string(t.shape()));
    params[i]->data = t.to_f64();
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward / backward

/// Positions at and beyond `length` are padding: masked as attention keys and
/// excluded from pooling.
struct Example {
  std::vector<int> tokens;
  std::size_t length = 0;
  int label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

inline Example make_example(std::vector<int> tokens, int label) {
  Example e;
  e.length = tokens.size();
  e.tokens = std::move(tokens);
  e.label = label;
  return e;
}

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

/// y = x W^T
inline Matrix matmul_bt(const Matrix& x, const Matrix& w) {
  Matrix y(x.rows, w.rows);
  for (std::size_t t = 0; t < x.rows; ++t) {
    const double* xr = x.data.data() + t * x.cols;
    for (std::size_t o = 0; o < w.rows; ++o) {
      const double* wr = w.data.data() + o * w.cols;
      double acc = 0.0;
      for (std::size_t i = 0; i < x.cols; ++i) acc += xr[i] * wr[i];
      y(t, o) = acc;
    }
  }
  return y;
}

/// dx = dy W
inline Matrix matmul(const Matrix& dy, const Matrix& w) {
  Matrix dx(dy.rows, w.cols);
  for (std::size_t t = 0; t < dy.rows; ++t)
    for (std::size_t o = 0; o < w.rows; ++o) {
      const double g = dy(t, o);
      if (g == 0.0) continue;
      const double* wr = w.data.data() + o * w.cols;
      double* dr = dx.data.data() + t * dx.cols;
      for (std::size_t i = 0; i < w.cols; ++i) dr[i] += g * wr[i];
    }
  return dx;
}

/// dW += dy^T x
inline void accumulate_outer(Matrix& dw, const Matrix& dy, const Matrix& x) {
  for (std::size_t t = 0; t < dy.rows; ++t)
    for (std::size_t o = 0; o < dy.cols; ++o) {
      const double g = dy(t, o);
      if (g == 0.0) continue;
      const double* xr = x.data.data() + t * x.cols;
      double* wr = dw.data.data() + o * dw.cols;
      for (std::size_t i = 0; i < x.cols; ++i) wr[i] += g * xr[i];
    }
}

inline double gelu(double u) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * u * (1.0 + std::tanh(c * (u + 0.044715 * u * u * u)));
}

inline double gelu_grad(double u) {
  constexpr double c = 0.7978845608028654;
  const double th = std::tanh(c * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * u * u);
}

struct LayerNormCache {
  Matrix normalized;
  std::vector<double> rstd;
};

inline Matrix layer_norm(const Matrix& x, const Matrix& scale, const Matrix& shift, LayerNormCache& cache) {
  cache.normalized = Matrix(x.rows, x.cols);
  cache.rstd.assign(x.rows, 0.0);
  Matrix y(x.rows, x.cols);
  const double n = static_cast<double>(x.cols);
  for (std::size_t t = 0; t < x.rows; ++t) {
    double mean = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) mean += x(t, j);
    mean /= n;
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) var += (x(t, j) - mean) * (x(t, j) - mean);
    var /= n;
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd[t] = rstd;
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double z = (x(t, j) - mean) * rstd;
      cache.normalized(t, j) = z;
      y(t, j) = z * scale.data[j] + shift.data[j];
    }
  }
  return y;
}

/// Returns dx; accumulates dscale and dshift.
inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& scale, const LayerNormCache& cache, Matrix& dscale,
                                  Matrix& dshift) {
  Matrix dx(dy.rows, dy.cols);
  const double n = static_cast<double>(dy.cols);
  std::vector<double> dz(dy.cols);
  for (std::size_t t = 0; t < dy.rows; ++t) {
    double mean_dz = 0.0, mean_dz_z = 0.0;
    for (std::size_t j = 0; j < dy.cols; ++j) {
      const double z = cache.normalized(t, j);
      dscale.data[j] += dy(t, j) * z;
      dshift.data[j] += dy(t, j);
      dz[j] = dy(t, j) * scale.data[j];
      mean_dz += dz[j];
      mean_dz_z += dz[j] * z;
    }
    mean_dz /= n;
    mean_dz_z /= n;
    for (std::size_t j = 0; j < dy.cols; ++j)
      dx(t, j) = cache.rstd[t] * (dz[j] - mean_dz - cache.normalized(t, j) * mean_dz_z);
  }
  return dx;
}

}  // namespace detail

struct LayerCache {
  Matrix input;  // residual stream entering the layer
  detail::LayerNormCache ln1;
  Matrix attn_in;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, T x T
  Matrix context;
  Matrix mid;  // residual stream after attention
  detail::LayerNormCache ln2;
  Matrix ffn_in;
  Matrix pre_act;
  Matrix act;
  Matrix output;  // residual stream leaving the layer
};

struct ForwardCache {
  std::uint64_t model_fingerprint = 0;
  std::vector<int> tokens;
  std::size_t length = 0;
  std::vector<LayerCache> layers;
  std::vector<double> pooled;
  std::vector<double> logits;
};

inline void check_example(const ToyConfig& cfg, const Example& ex) {
  if (ex.tokens.empty() || ex.length == 0 || ex.length > ex.tokens.size())
    fail(ErrorCode::ShapeError, "example needs 1 <= length <= token count");
  if (ex.tokens.size() > cfg.max_seq_len)
    fail(ErrorCode::ShapeError, "sequence of " + std::to_string(ex.tokens.size()) + " exceeds max_seq_len " +
                                    std::to_string(cfg.max_seq_len));
  for (int t : ex.tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab)
      fail(ErrorCode::ShapeError, "token id " + std::to_string(t) + " outside vocabulary");
  if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= cfg.num_classes)
    fail(ErrorCode::ShapeError, "label " + std::to_string(ex.label) + " outside 0.." +
                                    std::to_string(cfg.num_classes - 1));
}

namespace detail {

inline ForwardCache forward_with_fingerprint(const ToyModel& model, const Example& ex, std::uint64_t fingerprint) {
  const auto& cfg = model.config;
  check_example(cfg, ex);
  const std::size_t T = ex.tokens.size(), d = cfg.hidden, H = cfg.heads, dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardCache cache;
  cache.model_fingerprint = fingerprint;
  cache.tokens = ex.tokens;
  cache.length = ex.length;

  Matrix x(T, d);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j) x(t, j) = model.embed(static_cast<std::size_t>(ex.tokens[t]), j);

  cache.layers.resize(cfg.num_layers);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const ToyLayer& w = model.layers[l];
    LayerCache& c = cache.layers[l];
    c.input = x;
    c.attn_in = detail::layer_norm(x, w.ln1_scale, w.ln1_shift, c.ln1);
    c.q = detail::matmul_bt(c.attn_in, w.wq);
    c.k = detail::matmul_bt(c.attn_in, w.wk);
    c.v = detail::matmul_bt(c.attn_in, w.wv);
    c.context = Matrix(T, d);
    c.probs.assign(H, Matrix(T, T));
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      Matrix& p = c.probs[h];
      for (std::size_t t = 0; t < T; ++t) {
        double max_score = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < ex.length; ++s) {
          double score = 0.0;
          for (std::size_t j = 0; j < dh; ++j) score += c.q(t, off + j) * c.k(s, off + j);
          p(t, s) = score * inv_sqrt_dh;
          max_score = std::max(max_score, p(t, s));
        }
        double denom = 0.0;
        for (std::size_t s = 0; s < ex.length; ++s) {
          p(t, s) = std::exp(p(t, s) - max_score);
          denom += p(t, s);
        }
        for (std::size_t s = 0; s < ex.length; ++s) p(t, s) /= denom;
        for (std::size_t s = 0; s < ex.length; ++s)
          for (std::size_t j = 0; j < dh; ++j) c.context(t, off + j) += p(t, s) * c.v(s, off + j);
      }
    }
    const Matrix attn_out = detail::matmul_bt(c.context, w.wo);
    c.mid = x;
    for (std::size_t i = 0; i < x.data.size(); ++i) c.mid.data[i] += attn_out.data[i];
    c.ffn_in = detail::layer_norm(c.mid, w.ln2_scale, w.ln2_shift, c.ln2);
    c.pre_act = detail::matmul_bt(c.ffn_in, w.w1);
    c.act = c.pre_act;
    for (auto& u : c.act.data) u = detail::gelu(u);
    const Matrix ffn_out = detail::matmul_bt(c.act, w.w2);
    c.output = c.mid;
    for (std::size_t i = 0; i < x.data.size(); ++i) c.output.data[i] += ffn_out.data[i];
    x = c.output;
  }

  cache.pooled.assign(d, 0.0);
  for (std::size_t t = 0; t < ex.length; ++t)
    for (std::size_t j = 0; j < d; ++j) cache.pooled[j] += x(t, j);
  for (auto& v : cache.pooled) v /= static_cast<double>(ex.length);
  cache.logits.assign(cfg.num_classes, 0.0);
  for (std::size_t k = 0; k < cfg.num_classes; ++k)
    for (std::size_t j = 0; j < d; ++j) cache.logits[k] += model.head(k, j) * cache.pooled[j];
  for (double z : cache.logits)
    if (!std::isfinite(z)) fail(ErrorCode::NonFiniteActivation, "non-finite logit");
  return cache;
}

}  // namespace detail

/// Single-example forward pass. Returns the cache; logits are cache.logits.
inline ForwardCache forward(const ToyModel& model, const Example& ex) {
  return detail::forward_with_fingerprint(model, ex, model.fingerprint());
}

/// Logits for every example, [batch][num_classes]. An empty batch gives no rows.
inline std::vector<std::vector<double>> batch_logits(const ToyModel& model, std::span<const Example> batch) {
  std::vector<std::vector<double>> out;
  out.reserve(batch.size());
  for (const auto& ex : batch) out.push_back(detail::forward_with_fingerprint(model, ex, 0).logits);
  return out;
}

/// Softmax cross-entropy; fills dlogits with d(loss)/d(logits).
inline double cross_entropy(std::span<const double> logits, int label, std::vector<double>& dlogits) {
  double max_logit = -std::numeric_limits<double>::infinity();
  for (double z : logits) max_logit = std::max(max_logit, z);
  double denom = 0.0;
  for (double z : logits) denom += std::exp(z - max_logit);
  dlogits.resize(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) dlogits[k] = std::exp(logits[k] - max_logit) / denom;
  dlogits[static_cast<std::size_t>(label)] -= 1.0;
  return -(logits[static_cast<std::size_t>(label)] - max_logit - std::log(denom));
}

/// Reverse pass for one example. Accumulates weight gradients into `grads`
/// (a model of the same config) and returns d(loss)/d(input embeddings), T x d.
namespace detail {

inline Matrix backward_unchecked(const ToyModel& model, const ForwardCache& cache, std::span<const double> dlogits,
                                 ToyModel& grads) {
  const auto& cfg = model.config;
  if (dlogits.size() != cfg.num_classes) fail(ErrorCode::ShapeError, "upstream gradient has the wrong length");
  const std::size_t T = cache.tokens.size(), d = cfg.hidden, H = cfg.heads, dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<double> dpooled(d, 0.0);
  for (std::size_t k = 0; k < cfg.num_classes; ++k)
    for (std::size_t j = 0; j < d; ++j) {
      grads.head(k, j) += dlogits[k] * cache.pooled[j];
      dpooled[j] += model.head(k, j) * dlogits[k];
    }
  Matrix dx(T, d);
  for (std::size_t t = 0; t < cache.length; ++t)
    for (std::size_t j = 0; j < d; ++j) dx(t, j) = dpooled[j] / static_cast<double>(cache.length);

  for (std::size_t li = cfg.num_layers; li-- > 0;) {
    const ToyLayer& w = model.layers[li];
    ToyLayer& g = grads.layers[li];
    const LayerCache& c = cache.layers[li];

    // feed-forward branch
    detail::accumulate_outer(g.w2, dx, c.act);
    Matrix dact = detail::matmul(dx, w.w2);
    for (std::size_t i = 0; i < dact.data.size(); ++i) dact.data[i] *= detail::gelu_grad(c.pre_act.data[i]);
    detail::accumulate_outer(g.w1, dact, c.ffn_in);
    const Matrix dffn_in = detail::matmul(dact, w.w1);
    const Matrix dmid_ln = detail::layer_norm_backward(dffn_in, w.ln2_scale, c.ln2, g.ln2_scale, g.ln2_shift);
    Matrix dmid = dx;
    for (std::size_t i = 0; i < dmid.data.size(); ++i) dmid.data[i] += dmid_ln.data[i];

    // attention branch
    detail::accumulate_outer(g.wo, dmid, c.context);
    const Matrix dcontext = detail::matmul(dmid, w.wo);
    Matrix dq(T, d), dk(T, d), dv(T, d);
    std::vector<double> dp(T);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      const Matrix& p = c.probs[h];
      for (std::size_t t = 0; t < T; ++t) {
        double weighted = 0.0;
        for (std::size_t s = 0; s < cache.length; ++s) {
          double acc = 0.0;
          for (std::size_t j = 0; j < dh; ++j) {
            acc += dcontext(t, off + j) * c.v(s, off + j);
            dv(s, off + j) += p(t, s) * dcontext(t, off + j);
          }
          dp[s] = acc;
          weighted += p(t, s) * acc;
        }
        for (std::size_t s = 0; s < cache.length; ++s) {
          const double dscore = p(t, s) * (dp[s] - weighted) * inv_sqrt_dh;
          if (dscore == 0.0) continue;
          for (std::size_t j = 0; j < dh; ++j) {
            dq(t, off + j) += dscore * c.k(s, off + j);
            dk(s, off + j) += dscore * c.q(t, off + j);
          }
        }
      }
    }
    detail::accumulate_outer(g.wq, dq, c.attn_in);
    detail::accumulate_outer(g.wk, dk, c.attn_in);
    detail::accumulate_outer(g.wv, dv, c.attn_in);
    Matrix dattn_in = detail::matmul(dq, w.wq);
    const Matrix dk_in = detail::matmul(dk, w.wk);
    const Matrix dv_in = detail::matmul(dv, w.wv);
    for (std::size_t i = 0; i < dattn_in.data.size(); ++i) dattn_in.data[i] += dk_in.data[i] + dv_in.data[i];
    const Matrix dinput_ln = detail::layer_norm_backward(dattn_in, w.ln1_scale, c.ln1, g.ln1_scale, g.ln1_shift);
    dx = dmid;
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dinput_ln.data[i];
  }

  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j) grads.embed(static_cast<std::size_t>(cache.tokens[t]), j) += dx(t, j);
  return dx;
}

}  // namespace detail

inline Matrix backward(const ToyModel& model, const ForwardCache& cache, std::span<const double> dlogits,
                       ToyModel& grads) {
  if (cache.model_fingerprint != model.fingerprint())
    fail(ErrorCode::StaleCache, "forward cache was computed with different weights");
  if (!(grads.config == model.config)) fail(ErrorCode::ShapeError, "gradient buffer config differs from the model");
  return detail::backward_unchecked(model, cache, dlogits, grads);
}

inline int predict(const ToyModel& model, const Example& ex) {
  const auto cache = detail::forward_with_fingerprint(model, ex, 0);
  std::size_t best = 0;
  for (std::size_t k = 1; k < cache.logits.size(); ++k)
    if (cache.logits[k] > cache.logits[best]) best = k;
  return static_cast<int>(best);
}

inline double evaluate(const ToyModel& model, std::span<const Example> split) {
  if (split.empty()) fail(ErrorCode::EmptySplit, "cannot evaluate on an empty split");
  std::size_t wrong = 0;
  for (const auto& ex : split)
    if (predict(model, ex) != ex.label) ++wrong;
  return static_cast<double>(wrong) / static_cast<double>(split.size());
}

struct LossAndGrad {
  double loss = 0.0;
  ToyModel grads;
};

/// Mean cross-entropy over the batch and its gradient. Per-example gradients
/// are summed in example order.
inline LossAndGrad loss_and_grad(const ToyModel& model, std::span<const Example> batch) {
  LossAndGrad out{0.0, ToyModel::zeros(model.config)};
  if (batch.empty()) return out;
  const double scale = 1.0 / static_cast<double>(batch.size());
  std::vector<double> dlogits;
  auto outs = out.grads.params();
  ToyModel g = ToyModel::zeros(model.config);
  auto gs = g.params();
  for (const auto& ex : batch) {
    const auto cache = detail::forward_with_fingerprint(model, ex, 0);
    out.loss += cross_entropy(cache.logits, ex.label, dlogits);
    for (auto& g : dlogits) g *= scale;
    for (auto* m : gs) std::fill(m->data.begin(), m->data.end(), 0.0);
    detail::backward_unchecked(model, cache, dlogits, g);
    for (std::size_t p = 0; p < gs.size(); ++p)
      for (std::size_t i = 0; i < gs[p]->data.size(); ++i) outs[p]->data[i] += gs[p]->data[i];
  }
  out.loss *= scale;
  return out;
}

inline double batch_loss(const ToyModel& model, std::span<const Example> batch) {
  double loss = 0.0;
  std::vector<double> scratch;
  for (const auto& ex : batch)
    loss += cross_entropy(detail::forward_with_fingerprint(model, ex, 0).logits, ex.label, scratch);
  return batch.empty() ? 0.0 : loss / static_cast<double>(batch.size());
}

/// Per-layer residual-stream outputs, mean-pooled over valid positions: one
/// n x hidden matrix per layer.
inline std::vector<Matrix> pooled_layer_outputs(const ToyModel& model, std::span<const Example> examples) {
  std::vector<Matrix> out(model.config.num_layers, Matrix(examples.size(), model.config.hidden));
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto cache = detail::forward_with_fingerprint(model, examples[i], 0);
    for (std::size_t l = 0; l < model.config.num_layers; ++l) {
      const Matrix& o = cache.layers[l].output;
      for (std::size_t t = 0; t < examples[i].length; ++t)
        for (std::size_t j = 0; j < o.cols; ++j) out[l](i, j) += o(t, j);
      for (std::size_t j = 0; j < o.cols; ++j) out[l](i, j) /= static_cast<double>(examples[i].length);
    }
  }
  return out;
}

}  // namespace mam::toy

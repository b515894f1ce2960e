// SPDX-License-Identifier: Apache-2.0
// Acceptance runner: one PASS/FAIL line per criterion. Exit status 1 if any
// blocking criterion fails; trend checks report but do not block.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"

using namespace mam;
using namespace mam::toy;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
  std::vector<std::string> notes;  // printed indented under the verdict

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

struct Criterion {
  int id;
  std::string name;
  double budget_s;
  std::function<Outcome()> run;
  bool blocking = true;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

bool checkpoints_identical(const Checkpoint& a, const Checkpoint& b) {
  return a.entries() == b.entries() && a.metadata() == b.metadata();
}

// --- 1 -----------------------------------------------------------------------
Outcome container_round_trip() {
  Outcome o;
  Rng rng(1001);
  for (int i = 0; i < 100; ++i) {
    const auto c = fixtures::random_checkpoint(rng, 64);
    const auto bytes = serialize_checkpoint(c);
    const auto back = parse_checkpoint(bytes);
    o.require(checkpoints_identical(c, back), "checkpoint " + std::to_string(i) + " changed on round trip");
    for (const auto& [name, t] : c.entries()) {
      const auto a = t.bytes(), b = back.at(name).bytes();
      o.require(a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin()), "payload bytes differ: " + name);
    }
    o.require(serialize_checkpoint(back) == bytes, "re-serialization differs");
  }
  std::size_t rejected = 0;
  const auto corpus = fixtures::malformed_corpus();
  for (const auto& [label, bytes] : corpus) {
    const bool ok = fixtures::throws_code([&] { parse_checkpoint(bytes); }, ErrorCode::MalformedHeader);
    o.require(ok, "not rejected as MalformedHeader: " + label);
    rejected += ok;
  }
  o.notes.push_back("100 fuzz checkpoints round-tripped; " + std::to_string(rejected) + "/" +
                    std::to_string(corpus.size()) + " malformed files rejected");
  return o;
}

// --- 2 -----------------------------------------------------------------------
Outcome merge_endpoints() {
  Outcome o;
  Rng rng(2002);
  const auto cfg = LayerPatternConfig::toy();
  for (int pair = 0; pair < 50; ++pair) {
    const auto L = 1 + rng.below(6), d = 1 + rng.below(8);
    const DType dt = rng.below(2) ? DType::F32 : DType::F64;
    const auto src = fixtures::attention_checkpoint(rng, L, d, dt);
    const auto tgt = fixtures::attention_checkpoint(rng, L, d, dt);
    const auto sv = build_model_view(src, cfg), tv = build_model_view(tgt, cfg);
    auto run = [&](MergeSpec spec) { return merge({src, sv}, {tgt, tv}, spec); };
    MergeSpec zero, one, none, all, uni;
    zero.mode = UniformMode{0.0};
    one.mode = UniformMode{1.0};
    const double lam = rng.uniform();
    none.mode = SubsetMode{lam, {}};
    std::set<std::size_t> every;
    for (std::size_t i = 0; i < L; ++i) every.insert(i);
    all.mode = SubsetMode{lam, every};
    uni.mode = UniformMode{lam};

    const auto m0 = run(zero), m1 = run(one), mn = run(none), ma = run(all), mu = run(uni);
    std::set<std::string> attn;
    for (const auto& l : tv.layers)
      for (const auto& [role, name] : l.tensors(false)) attn.insert(name);
    const std::string tag = "pair " + std::to_string(pair) + ": ";
    for (const auto* m : {&m0, &m1, &mn, &ma, &mu})
      o.require(m->size() == tgt.size(), tag + "tensor count changed");
    for (std::size_t i = 0; i < tgt.size(); ++i) {
      const auto& [name, t] = tgt.entries()[i];
      o.require(m0.entries()[i].first == name && m0.entries()[i].second == t, tag + "lambda=0 differs at " + name);
      o.require(m1.entries()[i].second == (attn.contains(name) ? src.at(name) : t), tag + "lambda=1 wrong at " + name);
      o.require(mn.entries()[i].second == t, tag + "empty subset differs at " + name);
      o.require(ma.entries()[i].second == mu.entries()[i].second, tag + "full subset != uniform at " + name);
    }
  }
  o.notes.push_back("50 random pairs, every tensor compared");
  return o;
}

// --- 3 -----------------------------------------------------------------------
Outcome merge_formula_oracle() {
  Outcome o;
  Rng rng(3003);
  const auto cfg = LayerPatternConfig::toy();
  std::size_t checked = 0;
  for (int trial = 0; trial < 8; ++trial) {
    const DType dt = trial % 2 ? DType::F32 : DType::F64;
    const auto src = fixtures::attention_checkpoint(rng, 2, 8, dt);
    const auto tgt = fixtures::attention_checkpoint(rng, 2, 8, dt);
    const auto sv = build_model_view(src, cfg), tv = build_model_view(tgt, cfg);
    MergeSpec spec;
    const std::vector<double> lams{rng.uniform(), rng.uniform()};
    spec.mode = PerLayerMode{lams};
    const auto m = merge({src, sv}, {tgt, tv}, spec);
    for (std::size_t l = 0; l < 2; ++l)
      for (const auto& [role, name] : tv.layers[l].tensors(false)) {
        const Tensor &s = src.at(name), &t = tgt.at(name), &got = m.at(name);
        for (std::size_t i = 0; i < t.numel(); ++i) {
          double want = lams[l] * s[i] + (1.0 - lams[l]) * t[i];
          if (dt == DType::F32) want = static_cast<double>(static_cast<float>(want));
          o.require(got[i] == want, name + " element " + std::to_string(i) + " differs");
          ++checked;
        }
      }
  }
  o.notes.push_back(std::to_string(checked) + " elements compared exactly (F32 and F64)");
  return o;
}

// --- 4 -----------------------------------------------------------------------
Outcome noise_moments() {
  Outcome o;
  Rng rng(4004);
  const std::size_t d = 320;  // 102400 elements per matrix
  auto build = [&](double mean_shift, double sd_scale) {
    Checkpoint c;
    for (std::size_t i = 0; i < 2; ++i) {
      const std::string p = "layer." + std::to_string(i) + ".attn.";
      int r = 0;
      for (const char* w : {"q", "k", "v"}) {
        const double mean = mean_shift * (r - 1.0), var = std::pow(sd_scale * (0.5 + r), 2);
        c.add(p + w + ".weight", sample_gaussian({d, d}, mean, var, rng));
        ++r;
      }
    }
    return c;
  };
  const auto tgt = build(0.3, 0.05), src = build(-1.0, 1.7);
  const auto cfg = LayerPatternConfig::toy();
  const auto tv = build_model_view(tgt, cfg), sv = build_model_view(src, cfg);
  double worst_mean = 0.0, worst_var = 0.0;
  for (auto kind : {NoiseKind::MatchSource, NoiseKind::MatchTarget, NoiseKind::StandardNormal}) {
    const auto noise = make_noise_source({tgt, tv}, ModelRef{src, sv}, {kind, 77});
    for (const auto& l : tv.layers)
      for (const auto& [role, name] : l.tensors(false)) {
        TensorStats ref{0.0, 1.0};
        if (kind == NoiseKind::MatchSource) ref = tensor_stats(src.at(name));
        if (kind == NoiseKind::MatchTarget) ref = tensor_stats(tgt.at(name));
        const auto got = tensor_stats(noise.at(name));
        const double n = static_cast<double>(noise.at(name).numel());
        const double mean_z = std::abs(got.mean - ref.mean) / std::sqrt(ref.variance / n);
        const double var_rel = std::abs(got.variance - ref.variance) / ref.variance;
        worst_mean = std::max(worst_mean, mean_z);
        worst_var = std::max(worst_var, var_rel);
        const std::string tag = std::string(noise_kind_name(kind)) + " " + name;
        o.require(mean_z <= 3.0, tag + ": mean off by " + fmt("%.2f", mean_z) + " standard errors");
        o.require(var_rel <= 0.02, tag + ": variance off by " + fmt("%.4f", var_rel));
      }
  }
  o.notes.push_back("worst mean deviation " + fmt("%.2f", worst_mean) + " SE, worst variance deviation " +
                    fmt("%.3f%%", 100 * worst_var));
  return o;
}

// --- 5 -----------------------------------------------------------------------
Outcome swd_correctness() {
  Outcome o;
  Rng rng(5005);
  auto sample = [&](std::size_t n, std::size_t d, double shift) {
    Matrix m(n, d);
    for (auto& v : m.data) v = rng.normal() + shift;
    return m;
  };
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = 2 + rng.below(40);
    const auto x = sample(n, 1, 0.0), y = sample(n, 1, rng.uniform());
    const double p = trial % 3 == 0 ? 1.0 : 2.0;
    std::vector<double> a = x.data, b = y.data;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::pow(std::abs(a[i] - b[i]), p);
    const double exact = std::pow(acc / static_cast<double>(n), 1.0 / p);
    Rng proj(static_cast<std::uint64_t>(trial));
    const double rel = std::abs(swd(x, y, 1 + rng.below(16), p, proj) - exact) / exact;
    worst = std::max(worst, rel);
    o.require(rel <= 1e-12, "d=1 trial " + std::to_string(trial) + " rel err " + fmt("%.3g", rel));
  }
  const auto x = sample(64, 8, 0.0), y = sample(64, 8, 0.5);
  Rng a(9), b(9), c(9);
  o.require(swd(x, x, 128, 2.0, a) == 0.0, "swd(X,X) != 0");
  o.require(swd(x, y, 128, 2.0, b) == swd(y, x, 128, 2.0, c), "not symmetric under swap");
  double prev = 0.0;
  for (double shift : {0.1, 0.3, 1.0, 3.0, 10.0}) {
    Matrix z = x;
    for (std::size_t i = 0; i < z.rows; ++i) z(i, 0) += shift;
    Rng proj(11);
    const double dist = swd(x, z, 128, 2.0, proj);
    o.require(dist > prev, "not increasing at translation " + fmt("%g", shift));
    prev = dist;
  }
  o.notes.push_back("worst d=1 relative error " + fmt("%.2e", worst));
  return o;
}

// --- 6 -----------------------------------------------------------------------
Outcome gradient_suite() {
  Outcome o;
  Rng rng(6006);
  const ToyConfig cfg{2, 16, 2, 32, 16, 4, 12};
  ToyModel m = ToyModel::init(cfg, 61);
  for (auto& l : m.layers)
    for (Matrix* p : {&l.ln1_scale, &l.ln1_shift, &l.ln2_scale, &l.ln2_shift})
      for (auto& v : p->data) v += 0.2 * rng.normal();
  std::vector<Example> batch;
  for (int i = 0; i < 4; ++i) {
    std::vector<int> toks(4 + rng.below(8));
    for (auto& t : toks) t = 1 + static_cast<int>(rng.below(15));
    auto ex = make_example(toks, static_cast<int>(rng.below(4)));
    if (i == 2) ex.length -= 2;
    batch.push_back(ex);
  }
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); };
  const double eps = 1e-4;
  double worst = 0.0;
  std::size_t probes = 0;

  const auto lg = loss_and_grad(m, batch);
  auto params = m.params();
  const auto grads = lg.grads.params();
  const auto names = m.names();
  for (std::size_t p = 0; p < params.size(); ++p)
    for (int r = 0; r < 3; ++r) {
      const auto i = rng.below(params[p]->data.size());
      const double keep = params[p]->data[i];
      params[p]->data[i] = keep + eps;
      const double up = batch_loss(m, batch);
      params[p]->data[i] = keep - eps;
      const double down = batch_loss(m, batch);
      params[p]->data[i] = keep;
      const double e = rel(grads[p]->data[i], (up - down) / (2 * eps));
      worst = std::max(worst, e);
      o.require(e <= 1e-4, names[p] + " probe rel err " + fmt("%.3g", e));
      ++probes;
    }

  const ToyModel src = ToyModel::init(cfg, 62);
  const LMamState st{{-0.7, 1.1}};
  const auto g = lmam_gradients(src, m, st, batch);
  for (std::size_t i = 0; i < 2; ++i) {
    LMamState up = st, down = st;
    up.theta[i] += eps;
    down.theta[i] -= eps;
    const double fd = (batch_loss(merged_model(src, m, up.lambdas()), batch) -
                       batch_loss(merged_model(src, m, down.lambdas()), batch)) /
                      (2 * eps);
    const double e = rel(g.dtheta[i], fd);
    worst = std::max(worst, e);
    o.require(e <= 1e-4, "dtheta[" + std::to_string(i) + "] rel err " + fmt("%.3g", e));
    ++probes;
  }
  o.require(probes >= 20, "too few probes");

  // identical models: the gate gradient vanishes at every step while the target stays equal to the source
  const auto same = lmam_gradients(m, m, st, batch);
  for (double dt : same.dtheta) o.require(dt == 0.0, "dtheta != 0 for identical models");
  TaskSpec spec;
  spec.n_train = spec.n_source_train = 64;
  spec.n_dev = spec.n_test = 32;
  const auto task = gen_synthetic_task(66, spec);
  const ToyModel tm = ToyModel::init(task.spec.model_config(), 63);
  TrainHyper h;
  h.epochs = 3;
  h.lr = 0.0;
  const auto trained = train_lmam(tm, tm, task, h, st);
  o.require(trained.state.theta == st.theta, "gates moved with source == target");
  for (const auto& e : trained.history) o.require(e.lambdas == st.lambdas(), "gates moved with source == target");
  o.notes.push_back(std::to_string(probes) + " probes, worst relative error " + fmt("%.2e", worst));
  return o;
}

// --- 7 -----------------------------------------------------------------------
Outcome grid_search_protocol() {
  Outcome o;
  const std::vector<std::pair<double, double>> table{{0.0, 9.25},  {0.05, 9.11}, {0.10, 9.06},
                                                     {0.15, 9.20}, {0.20, 9.62}, {0.25, 11.12}};
  std::vector<double> grid;
  for (const auto& [l, e] : table) grid.push_back(l);
  auto lookup = [&](double l) {
    for (const auto& [k, e] : table)
      if (k == l) return e;
    return 1e9;
  };
  const auto r = grid_search_lambda(grid, lookup);
  o.require(r.best_lambda == 0.10 && r.best_error == 9.06, "picked lambda " + fmt("%g", r.best_lambda));
  const std::vector<double> ties{0.3, 0.1, 0.2};
  o.require(grid_search_lambda(ties, [](double) { return 1.0; }).best_lambda == 0.1, "tie not broken to smallest");
  const std::vector<double> two{0.2, 0.05, 0.1};
  o.require(grid_search_lambda(two, [](double l) { return l == 0.1 ? 3.0 : 2.0; }).best_lambda == 0.05,
            "partial tie not broken to smallest");
  o.notes.push_back("selected lambda " + fmt("%.2f", r.best_lambda) + " with error " + fmt("%.2f", r.best_error));
  return o;
}

// --- 8 -----------------------------------------------------------------------
Outcome noise_trend() {
  Outcome o;
  const std::vector<double> lams{0.0, 0.05, 0.1, 0.2, 0.4};
  std::vector<double> src_err(lams.size(), 0.0), noise_err(lams.size(), 0.0);
  const auto pattern = LayerPatternConfig::toy();
  const int seeds = 5;
  for (int s = 0; s < seeds; ++s) {
    const TaskSpec spec;
    const auto task = gen_synthetic_task(100 + s, spec);
    TrainHyper h;
    h.seed = s;
    const auto tgt = train_finetune(ToyModel::init(spec.model_config(), 1000 + s), task, h).model;
    TrainHyper hs = h;
    hs.seed = 50 + s;
    const auto src = train_finetune(ToyModel::init(spec.model_config(), 2000 + s), task, hs, &task.source_train,
                                    &task.source_dev)
                         .model;
    const auto tc = to_checkpoint(tgt), sc = to_checkpoint(src);
    const auto tv = build_model_view(tc, pattern), sv = build_model_view(sc, pattern);
    const auto noise = make_noise_source({tc, tv}, std::nullopt, {NoiseKind::StandardNormal, 7ull + s});
    std::ostringstream line;
    line << "seed " << s << ":";
    for (std::size_t i = 0; i < lams.size(); ++i) {
      MergeSpec ms;
      ms.mode = UniformMode{lams[i]};
      const double a = evaluate(from_checkpoint(merge({sc, sv}, {tc, tv}, ms)), task.test);
      const double n = evaluate(from_checkpoint(merge({noise, tv}, {tc, tv}, ms)), task.test);
      src_err[i] += 100.0 * a / seeds;
      noise_err[i] += 100.0 * n / seeds;
      line << " l=" << lams[i] << " src " << fmt("%.1f", 100 * a) << " noise " << fmt("%.1f", 100 * n);
    }
    o.notes.push_back(line.str());
  }
  std::ostringstream mean;
  mean << "mean test error (%):";
  for (std::size_t i = 0; i < lams.size(); ++i)
    mean << " l=" << lams[i] << " src " << fmt("%.2f", src_err[i]) << " noise " << fmt("%.2f", noise_err[i]);
  o.notes.push_back(mean.str());
  const double change = std::abs(src_err[1] - src_err[0]);
  o.require(change < 5.0, "source merge at 0.05 moved error by " + fmt("%.2f", change) + " points");
  for (std::size_t i = 2; i < lams.size(); ++i)
    o.require(noise_err[i] >= noise_err[i - 1], "noise error not monotone at lambda " + fmt("%g", lams[i]));
  const double rise = noise_err.back() - noise_err[0];
  o.require(rise >= 20.0, "noise at 0.4 only " + fmt("%.2f", rise) + " points above lambda=0");
  o.notes.push_back("source |delta| at 0.05 = " + fmt("%.2f", change) + " points; noise rise at 0.4 = " +
                    fmt("%.2f", rise) + " points");
  return o;
}

// --- 9 -----------------------------------------------------------------------
Outcome lmam_trend() {
  Outcome o;
  const int seeds = 10;
  double ft_mean = 0.0, lm_mean = 0.0;
  for (int s = 0; s < seeds; ++s) {
    const std::uint64_t seed = 9000 + s;
    TaskSpec spec;
    spec.n_train = 64;
    spec.n_source_train = 512;
    const auto task = gen_synthetic_task(seed, spec);
    TrainHyper h;
    h.seed = seed;
    TrainHyper hs = h;
    hs.seed = seed + 70;
    const auto src = train_finetune(ToyModel::init(spec.model_config(), seed + 2000), task, hs, &task.source_train,
                                    &task.source_dev)
                         .model;
    const auto init = ToyModel::init(spec.model_config(), seed + 1000);
    const auto ft = train_finetune(init, task, h);
    TrainHyper hl = h;
    hl.lambda_lr = 20.0;
    const auto lm = train_lmam(src, init, task, hl, 0.05);
    const double ef = 100.0 * evaluate(ft.model, task.test), el = 100.0 * evaluate(lm.merged, task.test);
    ft_mean += ef / seeds;
    lm_mean += el / seeds;
    std::ostringstream line;
    line << "seed " << seed << ": FT " << fmt("%.2f", ef) << " L-MAM+FT " << fmt("%.2f", el) << " lambda [";
    for (std::size_t i = 0; i < lm.lambdas.size(); ++i) line << (i ? ", " : "") << fmt("%.3f", lm.lambdas[i]);
    line << "]";
    o.notes.push_back(line.str());
  }
  o.notes.push_back("mean test error: FT " + fmt("%.2f", ft_mean) + "%, L-MAM+FT " + fmt("%.2f", lm_mean) + "%");
  o.require(lm_mean <= ft_mean + 0.5,
            "L-MAM+FT mean " + fmt("%.2f", lm_mean) + " exceeds FT mean + 0.5 (" + fmt("%.2f", ft_mean + 0.5) + ")");
  return o;
}

// --- 10 ----------------------------------------------------------------------
std::size_t brute_distance(const std::vector<std::string>& a, std::size_t i, const std::vector<std::string>& b,
                           std::size_t j) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  if (a[i] == b[j]) return brute_distance(a, i + 1, b, j + 1);
  return 1 + std::min({brute_distance(a, i + 1, b, j + 1), brute_distance(a, i + 1, b, j),
                       brute_distance(a, i, b, j + 1)});
}

Outcome edit_analysis() {
  using namespace mam::analysis;
  Outcome o;
  Rng rng(1010);
  const std::vector<std::string> words{"the", "cat", "hat", "rout", "route", "a"};
  for (int trial = 0; trial < 200; ++trial) {
    const Unit unit = trial % 2 ? Unit::Word : Unit::Char;
    auto text = [&] {
      std::string s;
      const auto n = rng.below(7);
      for (std::uint64_t i = 0; i < n; ++i) {
        if (unit == Unit::Word) s += (s.empty() ? "" : " ") + words[rng.below(words.size())];
        else s += "abcd"[rng.below(4)];
      }
      return s;
    };
    const auto r = text(), h = text();
    const auto ru = split_units(r, unit), hu = split_units(h, unit);
    o.require(levenshtein_align(r, h, unit).distance() == brute_distance(ru, 0, hu, 0),
              "distance mismatch for '" + r + "' / '" + h + "'");
  }
  o.require(wer({"the cat"}, {"the hat"}) == 0.5, "wer(the cat, the hat) != 0.5");
  const auto b = categorize_improvements({"the route"}, {"the rout"}, {"the route"});
  o.require(b.has_improvement && b.insertion_pct == 100.0 && b.substitution_pct == 0.0 && b.deletion_pct == 0.0,
            "rout -> route not 100% insertion");
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::string> refs, base, merged;
    for (int u = 0; u < 4; ++u) {
      std::string x, y, z;
      for (int k = 0; k < 5; ++k) {
        x += "abc"[rng.below(3)];
        if (rng.below(3)) y += "abc"[rng.below(3)];
        if (rng.below(2)) z += "abc"[rng.below(3)];
      }
      refs.push_back(x);
      base.push_back(y);
      merged.push_back(z);
    }
    const auto c = categorize_improvements(refs, base, merged);
    if (c.has_improvement)
      o.require(std::abs(c.insertion_pct + c.substitution_pct + c.deletion_pct - 100.0) <= 1e-9,
                "percentages do not sum to 100");
  }
  o.notes.push_back("200 oracle pairs; rout -> route = " + fmt("%.0f", b.insertion_pct) + "% insertion");
  return o;
}

// --- 11 ----------------------------------------------------------------------
Outcome end_to_end() {
  Outcome o;
  const fs::path dir = fs::absolute("acceptance_e2e");
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto p = [&](const std::string& name) { return (dir / name).string(); };
  const std::string tool = MAM_CLI_PATH;
  std::size_t step = 0;
  auto sh = [&](const std::string& args) {
    const std::string log = p("step" + std::to_string(++step) + ".log");
    const int rc = std::system((tool + " " + args + " > " + log + " 2>&1").c_str());
    o.require(rc == 0, "exit " + std::to_string(rc) + " from: mam " + args);
    return rc == 0;
  };

  // primary artifact -> name of the file it reads from the previous stage
  const std::vector<std::pair<std::string, std::vector<std::string>>> chain{
      {"task.json", {}},
      {"source.safetensors", {"task.json"}},
      {"target.safetensors", {"task.json"}},
      {"source_reps.safetensors", {"task.json", "source.safetensors"}},
      {"target_reps.safetensors", {"task.json", "target.safetensors"}},
      {"selection.json", {"source_reps.safetensors", "target_reps.safetensors"}},
      {"merged.safetensors", {"source.safetensors", "target.safetensors", "selection.json"}},
      {"eval.json", {"task.json", "merged.safetensors"}},
  };
  bool ok = sh("toy gen-task --seed 11 --out " + p("task.json")) &&
            sh("toy train --task " + p("task.json") + " --variant source --seed 21 --num-layers 4 --out " +
               p("source.safetensors")) &&
            sh("toy train --task " + p("task.json") + " --seed 22 --num-layers 4 --out " + p("target.safetensors")) &&
            sh("toy export-reps --task " + p("task.json") + " --model " + p("source.safetensors") + " --out " +
               p("source_reps.safetensors")) &&
            sh("toy export-reps --task " + p("task.json") + " --model " + p("target.safetensors") + " --out " +
               p("target_reps.safetensors")) &&
            sh("select-layers --source " + p("source_reps.safetensors") + " --target " + p("target_reps.safetensors") +
               " --metric swd --k 2 --projections 128 --seed 7 --report " + p("selection.json")) &&
            sh("merge --source " + p("source.safetensors") + " --target " + p("target.safetensors") +
               " --lambda 0.1 --layers @" + p("selection.json") + " --out " + p("merged.safetensors")) &&
            sh("toy eval --task " + p("task.json") + " --model " + p("merged.safetensors") + " --report " +
               p("eval.json"));
  if (!ok) return o;

  // manifest chain: every artifact has one, and recorded input digests match the producer's output digest
  std::map<std::string, std::string> produced;
  for (const auto& [artifact, inputs] : chain) {
    const auto mpath = p(artifact) + ".manifest.json";
    if (!fs::exists(mpath)) {
      o.require(false, "missing manifest for " + artifact);
      continue;
    }
    const auto m = json::parse(read_file_bytes(mpath));
    for (const char* key : {"subcommand", "argv", "params", "seeds", "inputs", "outputs", "tool_version", "timestamp"})
      o.require(m.contains(key), artifact + " manifest lacks " + key);
    o.require(m["outputs"].value(p(artifact), "") == digest_hex(read_file_bytes(p(artifact))),
              artifact + " digest not recorded");
    produced[p(artifact)] = m["outputs"].value(p(artifact), "");
    for (const auto& in : inputs)
      o.require(m["inputs"].contains(p(in)) && m["inputs"][p(in)] == produced[p(in)],
                artifact + " manifest does not chain to " + in);
  }
  const auto sel = json::parse(read_file_bytes(p("selection.json")))["selected"];
  const auto merged_layers = read_checkpoint(p("merged.safetensors")).metadata().at("mam.layers");
  std::set<std::size_t> want, got;
  for (const auto& v : sel) want.insert(v.get<std::size_t>());
  for (const auto& v : json::parse(merged_layers)) got.insert(v.get<std::size_t>());
  o.require(want.size() == 2 && got == want, "merge did not use the selected layers");

  // re-run every stage from its manifest and compare bytes
  std::size_t identical = 0;
  for (const auto& [artifact, inputs] : chain) {
    const auto before = read_file_bytes(p(artifact));
    fs::remove(p(artifact));
    if (!sh("rerun --manifest " + p(artifact) + ".manifest.json")) continue;
    const bool same = fs::exists(p(artifact)) && read_file_bytes(p(artifact)) == before;
    o.require(same, artifact + " differs after rerun");
    identical += same;
  }
  const double err = json::parse(read_file_bytes(p("eval.json")))["error"];
  o.notes.push_back("selected layers " + sel.dump() + ", merged test error " + fmt("%.3f", err) + "; " +
                    std::to_string(identical) + "/" + std::to_string(chain.size()) + " artifacts byte-identical on rerun");
  return o;
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "container round-trip and malformed-header rejection", 10, container_round_trip},
      {2, "merge endpoints and subset degenerate cases", 10, merge_endpoints},
      {3, "merge formula matches scalar oracle", 1, merge_formula_oracle},
      {4, "noise moment matching", 5, noise_moments},
      {5, "SWD correctness", 10, swd_correctness},
      {6, "gradient suite", 60, gradient_suite},
      {7, "grid-search protocol", 1, grid_search_protocol},
      {8, "merge trend: trained source vs N(0,1) noise", 180, noise_trend},
      {9, "L-MAM+FT vs FT trend", 300, lmam_trend, false},
      {10, "edit-analysis oracle", 5, edit_analysis},
      {11, "end-to-end CLI pipeline with manifest reruns", 180, end_to_end},
  };
  int failures = 0, blocking_failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (o.pass && secs > c.budget_s) {
      o.pass = false;
      o.detail = "over time budget";
    }
    failures += !o.pass;
    blocking_failures += !o.pass && c.blocking;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << " (" << fmt("%.2f", secs) << " s, budget "
              << c.budget_s << " s)";
    if (!o.pass) std::cout << ": " << o.detail << (c.blocking ? "" : " [trend check, non-blocking]");
    std::cout << "\n";
    for (const auto& n : o.notes) std::cout << "    " << n << "\n";
    std::cout.flush();
  }
  std::cout << (failures ? "PASSED " : "ALL PASSED ") << criteria.size() - failures << "/" << criteria.size();
  if (failures > blocking_failures) std::cout << " (" << failures - blocking_failures << " non-blocking trend failure)";
  std::cout << "\n";
  return blocking_failures ? 1 : 0;
}

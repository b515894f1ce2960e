// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "mam/error.hpp"
#include "mam/tensor.hpp"
#include "mam/toy/model.hpp"

namespace mam::toy {

/// Sequence classification over token patterns. Each class owns a small
/// signature set of tokens; a position draws from the signature with
/// probability `signal`, otherwise uniformly from the non-pad vocabulary.
/// Token 0 is reserved for padding and never generated.
///
/// The source variant replaces each token t with its cyclic successor in
/// 1..vocab-1 with probability `shift`, giving a related task with shifted
/// token statistics. Source dev/test are the shifted twins of the target
/// dev/test examples (paired by index); source train starts with the twins of
/// target train and appends extra examples up to n_source_train.
struct TaskSpec {
  std::size_t vocab = 16;
  std::size_t num_classes = 4;
  std::size_t min_len = 6;
  std::size_t max_len = 12;
  std::size_t signature_size = 3;
  double signal = 0.35;
  std::size_t n_train = 256;
  std::size_t n_dev = 256;
  std::size_t n_test = 512;
  std::size_t n_source_train = 256;
  double shift = 0.3;

  void validate() const {
    if (vocab < 3) fail(ErrorCode::BadSpec, "vocab must be at least 3");
    if (num_classes < 2) fail(ErrorCode::BadSpec, "need at least 2 classes");
    if (min_len < 1 || max_len < min_len) fail(ErrorCode::BadSpec, "need 1 <= min_len <= max_len");
    if (signature_size < 1) fail(ErrorCode::BadSpec, "signature_size must be positive");
    if (!(signal >= 0.0 && signal <= 1.0)) fail(ErrorCode::BadSpec, "signal must lie in [0,1]");
    if (!(shift >= 0.0 && shift <= 1.0)) fail(ErrorCode::BadSpec, "shift must lie in [0,1]");
    if (n_train == 0 || n_dev == 0 || n_test == 0) fail(ErrorCode::BadSpec, "splits must be non-empty");
    if (n_source_train < n_train) fail(ErrorCode::BadSpec, "n_source_train must be >= n_train");
  }

  /// Model config matching this task's vocabulary, classes and lengths.
  ToyConfig model_config(std::size_t num_layers = 2, std::size_t hidden = 16, std::size_t heads = 2,
                         std::size_t ffn = 32) const {
    return {num_layers, hidden, heads, ffn, vocab, num_classes, max_len};
  }

  nlohmann::json to_json() const {
    return {{"vocab", vocab}, {"num_classes", num_classes}, {"min_len", min_len}, {"max_len", max_len},
            {"signature_size", signature_size}, {"signal", signal}, {"n_train", n_train}, {"n_dev", n_dev},
            {"n_test", n_test}, {"n_source_train", n_source_train}, {"shift", shift}};
  }

  static TaskSpec from_json(const nlohmann::json& j) {
    TaskSpec s;
    try {
      s.vocab = j.value("vocab", s.vocab);
      s.num_classes = j.value("num_classes", s.num_classes);
      s.min_len = j.value("min_len", s.min_len);
      s.max_len = j.value("max_len", s.max_len);
      s.signature_size = j.value("signature_size", s.signature_size);
      s.signal = j.value("signal", s.signal);
      s.n_train = j.value("n_train", s.n_train);
      s.n_dev = j.value("n_dev", s.n_dev);
      s.n_test = j.value("n_test", s.n_test);
      s.n_source_train = j.value("n_source_train", std::max(s.n_source_train, s.n_train));
      s.shift = j.value("shift", s.shift);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::BadSpec, std::string("bad task spec: ") + e.what());
    }
    s.validate();
    return s;
  }
};

struct SyntheticTask {
  std::uint64_t seed = 0;
  TaskSpec spec;
  std::vector<Example> train, dev, test;
  std::vector<Example> source_train, source_dev, source_test;

  std::vector<Example>& split(std::string_view name, bool source = false) {
    if (name == "train") return source ? source_train : train;
    if (name == "dev") return source ? source_dev : dev;
    if (name == "test") return source ? source_test : test;
    fail(ErrorCode::BadSpec, "unknown split '" + std::string(name) + "' (expected train, dev or test)");
  }
  const std::vector<Example>& split(std::string_view name, bool source = false) const {
    return const_cast<SyntheticTask*>(this)->split(name, source);
  }

  nlohmann::json to_json() const {
    auto dump = [](const std::vector<Example>& xs) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& e : xs) arr.push_back({{"tokens", e.tokens}, {"label", e.label}});
      return arr;
    };
    return {{"seed", seed},
            {"spec", spec.to_json()},
            {"target", {{"train", dump(train)}, {"dev", dump(dev)}, {"test", dump(test)}}},
            {"source", {{"train", dump(source_train)}, {"dev", dump(source_dev)}, {"test", dump(source_test)}}}};
  }

  static SyntheticTask from_json(const nlohmann::json& j) {
    SyntheticTask t;
    try {
      t.seed = j.at("seed").get<std::uint64_t>();
      t.spec = TaskSpec::from_json(j.at("spec"));
      auto load = [](const nlohmann::json& arr) {
        std::vector<Example> xs;
        for (const auto& e : arr) xs.push_back(make_example(e.at("tokens").get<std::vector<int>>(), e.at("label").get<int>()));
        return xs;
      };
      for (const char* s : {"train", "dev", "test"}) {
        t.split(s, false) = load(j.at("target").at(s));
        t.split(s, true) = load(j.at("source").at(s));
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::BadSpec, std::string("bad task file: ") + e.what());
    }
    return t;
  }
};

inline SyntheticTask gen_synthetic_task(std::uint64_t seed, const TaskSpec& spec) {
  spec.validate();
  SyntheticTask task;
  task.seed = seed;
  task.spec = spec;
  Rng base(seed);
  Rng shift_rng(seed ^ 0x5851F42D4C957F2DULL);
  const std::size_t alphabet = spec.vocab - 1;  // tokens 1..vocab-1
  std::set<std::vector<int>> seen;

  auto draw = [&]() {
    for (;;) {
      const int label = static_cast<int>(base.below(spec.num_classes));
      const std::size_t len = spec.min_len + base.below(spec.max_len - spec.min_len + 1);
      std::vector<int> tokens(len);
      for (auto& tok : tokens) {
        if (base.uniform() < spec.signal) {
          const std::size_t j = base.below(spec.signature_size);
          tok = 1 + static_cast<int>((static_cast<std::size_t>(label) * spec.signature_size + j) % alphabet);
        } else {
          tok = 1 + static_cast<int>(base.below(alphabet));
        }
      }
      if (seen.insert(tokens).second) return make_example(std::move(tokens), label);
    }
  };
  auto shifted = [&](const Example& e) {
    Example s = e;
    for (auto& tok : s.tokens)
      if (shift_rng.uniform() < spec.shift) tok = 1 + static_cast<int>(static_cast<std::size_t>(tok) % alphabet);
    return s;
  };

  for (std::size_t i = 0; i < spec.n_train; ++i) task.train.push_back(draw());
  for (std::size_t i = 0; i < spec.n_dev; ++i) task.dev.push_back(draw());
  for (std::size_t i = 0; i < spec.n_test; ++i) task.test.push_back(draw());
  for (const auto& e : task.train) task.source_train.push_back(shifted(e));
  for (const auto& e : task.dev) task.source_dev.push_back(shifted(e));
  for (const auto& e : task.test) task.source_test.push_back(shifted(e));
  for (std::size_t i = spec.n_train; i < spec.n_source_train; ++i) task.source_train.push_back(shifted(draw()));
  return task;
}

}  // namespace mam::toy

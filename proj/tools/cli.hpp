// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mam/mam.hpp"

namespace mam::cli {

using nlohmann::json;

/// Bad flags or flag values; exits with status 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

inline LogLevel log_level_from_env() {
  const char* v = std::getenv("MAM_LOG");
  if (!v) return LogLevel::Error;
  const std::string s(v);
  if (s == "debug") return LogLevel::Debug;
  if (s == "info") return LogLevel::Info;
  return LogLevel::Error;
}

struct Context {
  std::ostream& out;
  std::ostream& err;
  LogLevel level = LogLevel::Error;
  std::vector<std::string> argv;
  const CLI::App* command = nullptr;
  std::string command_path;
  json inputs = json::object();
  json outputs = json::object();
  json seeds = json::object();

  Context(std::ostream& o, std::ostream& e, LogLevel l, std::vector<std::string> a)
      : out(o), err(e), level(l), argv(std::move(a)) {}

  void info(const std::string& msg) const {
    if (level >= LogLevel::Info) err << "[info] " << msg << "\n";
  }
  void debug(const std::string& msg) const {
    if (level >= LogLevel::Debug) err << "[debug] " << msg << "\n";
  }

  void note_input(const std::string& path) { inputs[path] = digest_hex(read_file_bytes(path)); }
  void note_output(const std::string& path) { outputs[path] = digest_hex(read_file_bytes(path)); }
};

// ---------------------------------------------------------------------------
// Flag value parsing

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    out.push_back(item);
  }
  return out;
}

inline double parse_real(const std::string& s, const std::string& flag) {
  std::size_t used = 0;
  double v;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw UsageError(flag + ": '" + s + "' is not a number");
  }
  if (used != s.size()) throw UsageError(flag + ": '" + s + "' is not a number");
  return v;
}

inline std::size_t parse_index(const std::string& s, const std::string& flag) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw UsageError(flag + ": '" + s + "' is not a non-negative integer");
  return std::stoul(s);
}

/// Comma-separated lambdas, each validated to [0,1].
inline std::vector<double> parse_lambdas(const std::string& s, const std::string& flag = "--lambda") {
  std::vector<double> out;
  for (const auto& item : split(s, ',')) {
    const double v = parse_real(item, flag);
    try {
      check_lambda(v);
    } catch (const Error& e) {
      throw UsageError(std::string(e.what()));
    }
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(flag + " needs at least one value");
  return out;
}

/// "12-19", "0,4,7", "0-3,8" (0-based, inclusive), or "@report.json" to take
/// the "selected" list of a select-layers report.
inline std::set<std::size_t> parse_layers(const std::string& s, Context* ctx = nullptr) {
  std::set<std::size_t> out;
  if (!s.empty() && s.front() == '@') {
    const std::string path = s.substr(1);
    json report;
    try {
      report = json::parse(read_file_bytes(path));
      for (const auto& v : report.at("selected")) out.insert(v.get<std::size_t>());
    } catch (const json::exception& e) {
      throw UsageError("--layers: cannot read 'selected' from " + path + ": " + e.what());
    }
    if (ctx) ctx->note_input(path);
    return out;
  }
  for (const auto& item : split(s, ',')) {
    if (item.empty()) continue;
    const auto dash = item.find('-');
    if (dash == std::string::npos) {
      out.insert(parse_index(item, "--layers"));
      continue;
    }
    const auto a = parse_index(item.substr(0, dash), "--layers");
    const auto b = parse_index(item.substr(dash + 1), "--layers");
    if (a > b) throw UsageError("--layers: range '" + item + "' is reversed");
    for (auto i = a; i <= b; ++i) out.insert(i);
  }
  return out;
}

inline LayerPatternConfig resolve_pattern(const std::string& value, Context& ctx) {
  if (value == "toy") return LayerPatternConfig::toy();
  if (value == "bert") return LayerPatternConfig::bert();
  if (value == "hubert") return LayerPatternConfig::hubert();
  ctx.note_input(value);
  return LayerPatternConfig::load(value);
}

inline void write_json_file(const std::string& path, const json& j) { write_file_bytes(path, j.dump(2) + "\n"); }

inline std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Resolved flag values of the running subcommand, defaults included.
inline json resolved_params(const CLI::App& app) {
  json params = json::object();
  for (const CLI::Option* opt : app.get_options()) {
    const std::string name = opt->get_name(false, true);
    if (name.empty() || name == "--help" || name == "-h") continue;
    const std::string key = opt->get_single_name();
    if (opt->count() > 0) {
      const auto& res = opt->results();
      if (opt->get_type_size() == 0) params[key] = true;
      else if (res.size() == 1) params[key] = res.front();
      else params[key] = res;
    } else if (!opt->get_default_str().empty()) {
      params[key] = opt->get_default_str();
    } else if (opt->get_type_size() == 0) {
      params[key] = false;
    }
  }
  return params;
}

/// Writes <primary>.manifest.json describing how the artifact was produced.
inline void write_manifest(const std::string& primary, Context& ctx) {
  json m;
  m["subcommand"] = ctx.command_path;
  m["argv"] = ctx.argv;
  m["params"] = ctx.command ? resolved_params(*ctx.command) : json::object();
  m["seeds"] = ctx.seeds;
  m["inputs"] = ctx.inputs;
  m["outputs"] = ctx.outputs;
  m["tool_version"] = kVersion;
  m["timestamp"] = now_utc();
  write_json_file(primary + ".manifest.json", m);
  ctx.info("wrote manifest " + primary + ".manifest.json");
}

inline Checkpoint load_checkpoint(const std::string& path, Context& ctx) {
  ctx.note_input(path);
  ctx.debug("reading " + path);
  return read_checkpoint(path);
}

inline toy::SyntheticTask load_task(const std::string& path, Context& ctx) {
  ctx.note_input(path);
  try {
    return toy::SyntheticTask::from_json(json::parse(read_file_bytes(path)));
  } catch (const json::exception& e) {
    fail(ErrorCode::BadSpec, "cannot parse task file '" + path + "': " + e.what());
  }
}

inline std::vector<toy::Example> toy_split(const toy::SyntheticTask& task, const std::string& split,
                                           const std::string& variant) {
  if (variant != "target" && variant != "source") throw UsageError("--variant must be target or source");
  return task.split(split, variant == "source");
}

// ---------------------------------------------------------------------------
// Subcommands

struct PatternFlags {
  std::string both = "toy";
  std::string source, target;

  void add(CLI::App* app) {
    app->add_option("--pattern-config", both, "Layer naming for both models: toy, bert, hubert or a JSON file")
        ->capture_default_str();
    app->add_option("--source-pattern-config", source, "Layer naming override for the source model");
    app->add_option("--target-pattern-config", target, "Layer naming override for the target model");
  }
  LayerPatternConfig for_source(Context& ctx) const { return resolve_pattern(source.empty() ? both : source, ctx); }
  LayerPatternConfig for_target(Context& ctx) const { return resolve_pattern(target.empty() ? both : target, ctx); }
};

struct MergeArgs {
  std::string source, target, out, lambda, layers, noise, report;
  std::optional<std::uint64_t> seed;
  bool include_bias = false;
  std::size_t threads = 1;
  PatternFlags patterns;
};

inline void run_merge(const MergeArgs& a, Context& ctx) {
  const auto lambdas = parse_lambdas(a.lambda);
  MergeSpec spec;
  spec.include_bias = a.include_bias;
  if (!a.layers.empty()) {
    if (lambdas.size() != 1) throw UsageError("--layers takes a single --lambda value");
    spec.mode = SubsetMode{lambdas.front(), parse_layers(a.layers, &ctx)};
  } else if (lambdas.size() > 1) {
    spec.mode = PerLayerMode{lambdas};
  } else {
    spec.mode = UniformMode{lambdas.front()};
  }
  std::optional<NoiseKind> noise;
  if (!a.noise.empty()) {
    if (a.noise == "source") noise = NoiseKind::MatchSource;
    else if (a.noise == "target") noise = NoiseKind::MatchTarget;
    else if (a.noise == "std") noise = NoiseKind::StandardNormal;
    else throw UsageError("--noise must be source, target or std");
    if (!a.seed) throw UsageError("--noise requires an explicit --seed");
  }
  if (a.source.empty() && (!noise || *noise == NoiseKind::MatchSource))
    throw UsageError("--source is required" + std::string(noise ? " for --noise source" : ""));

  const Checkpoint target = load_checkpoint(a.target, ctx);
  const ModelView target_view = build_model_view(target, a.patterns.for_target(ctx));
  std::optional<Checkpoint> source;
  std::optional<ModelView> source_view;
  if (!a.source.empty() && (!noise || *noise == NoiseKind::MatchSource)) {
    source = load_checkpoint(a.source, ctx);
    source_view = build_model_view(*source, a.patterns.for_source(ctx));
  }

  Checkpoint merged;
  if (noise) {
    ctx.seeds["noise"] = *a.seed;
    std::optional<ModelRef> reference;
    if (source) reference.emplace(ModelRef{*source, *source_view});
    const Checkpoint noise_ckpt = make_noise_source({target, target_view}, reference, {*noise, *a.seed});
    merged = merge({noise_ckpt, target_view}, {target, target_view}, spec, a.threads);
  } else {
    merged = merge({*source, *source_view}, {target, target_view}, spec, a.threads);
  }
  write_checkpoint(merged, a.out);
  ctx.note_output(a.out);
  json summary{{"out", a.out},
               {"mode", spec.mode_name()},
               {"lambda", spec.lambda_json()},
               {"layers", json::parse(merged.metadata().at("mam.layers"))},
               {"noise_kind", merged.metadata().at("mam.noise_kind")}};
  if (!a.report.empty()) {
    write_json_file(a.report, summary);
    ctx.note_output(a.report);
  }
  ctx.out << summary.dump() << "\n";
  write_manifest(a.out, ctx);
}

struct SelectArgs {
  std::string source, target, metric = "swd", report;
  std::size_t k = 0, projections = 128, threads = 1;
  double p = 2.0;
  std::optional<std::uint64_t> seed;
};

inline void run_select(const SelectArgs& a, Context& ctx) {
  Metric metric;
  try {
    metric = parse_metric(a.metric);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  if (metric == Metric::SWD && !a.seed) throw UsageError("--metric swd requires an explicit --seed");
  SwdParams params{a.projections, a.p, a.seed.value_or(0)};
  if (a.seed) ctx.seeds["projections"] = *a.seed;
  const auto src = representations_from_checkpoint(load_checkpoint(a.source, ctx));
  const auto tgt = representations_from_checkpoint(load_checkpoint(a.target, ctx));
  const auto sel = rank_and_select(src, tgt, metric, a.k, params, a.threads);
  const json report = sel.to_json();
  ctx.out << report.dump() << "\n";
  if (!a.report.empty()) {
    write_json_file(a.report, report);
    ctx.note_output(a.report);
    write_manifest(a.report, ctx);
  }
}

struct GridArgs {
  std::string source, target, grid = "0,0.05,0.1,0.15,0.2,0.25", task, table, report, split = "dev";
  std::size_t threads = 1;
  PatternFlags patterns;
};

/// Stub evaluation table: {"0.1": 9.06, ...} or [{"lambda": 0.1, "error": 9.06}, ...].
inline std::vector<std::pair<double, double>> load_eval_table(const std::string& path) {
  std::vector<std::pair<double, double>> rows;
  try {
    const json j = json::parse(read_file_bytes(path));
    if (j.is_object()) {
      for (const auto& [k, v] : j.items()) rows.emplace_back(parse_real(k, "--table"), v.get<double>());
    } else {
      for (const auto& r : j) rows.emplace_back(r.at("lambda").get<double>(), r.at("error").get<double>());
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::BadSpec, "cannot parse eval table '" + path + "': " + e.what());
  }
  return rows;
}

inline void run_grid(const GridArgs& a, Context& ctx) {
  const auto grid = parse_lambdas(a.grid, "--grid");
  if (a.task.empty() == a.table.empty()) throw UsageError("give exactly one of --task or --table");
  toy::GridSearchResult result;
  if (!a.table.empty()) {
    ctx.note_input(a.table);
    const auto rows = load_eval_table(a.table);
    result = toy::grid_search_lambda(grid, [&](double l) {
      for (const auto& [lam, err] : rows)
        if (lam == l) return err;
      fail(ErrorCode::BadSpec, "eval table has no entry for lambda " + std::to_string(l));
    });
  } else {
    if (a.source.empty() || a.target.empty()) throw UsageError("--task needs --source and --target");
    const auto task = load_task(a.task, ctx);
    const auto source = load_checkpoint(a.source, ctx);
    const auto target = load_checkpoint(a.target, ctx);
    const auto sv = build_model_view(source, a.patterns.for_source(ctx));
    const auto tv = build_model_view(target, a.patterns.for_target(ctx));
    const auto split = toy_split(task, a.split, "target");
    result = toy::grid_search_lambda({source, sv}, {target, tv}, grid, [&](const Checkpoint& merged) {
      return toy::evaluate(toy::from_checkpoint(merged), split);
    });
  }
  const json report = result.to_json();
  ctx.out << report.dump() << "\n";
  if (!a.report.empty()) {
    write_json_file(a.report, report);
    ctx.note_output(a.report);
    write_manifest(a.report, ctx);
  }
}

struct AnalyzeArgs {
  std::string ref, baseline, merged, report;
};

inline std::vector<std::string> read_lines(const std::string& path) {
  std::istringstream in(read_file_bytes(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline void run_analyze(const AnalyzeArgs& a, Context& ctx) {
  for (const auto* p : {&a.ref, &a.baseline, &a.merged}) ctx.note_input(*p);
  const auto refs = read_lines(a.ref);
  const auto base = read_lines(a.baseline);
  const auto merged = read_lines(a.merged);
  const auto breakdown = analysis::categorize_improvements(refs, base, merged);
  json report;
  report["wer_baseline"] = analysis::wer(refs, base);
  report["wer_merged"] = analysis::wer(refs, merged);
  const json b = breakdown.to_json();
  report["regressions"] = b["regressions"];
  json improvement = b;
  improvement.erase("regressions");
  report["improvement"] = improvement;
  report["utterances"] = refs.size();
  report["normalization"] = "trim, ASCII lowercase, whitespace collapsed";
  report["alignment_tie_break"] = "substitute > delete > insert";
  ctx.out << report.dump() << "\n";
  if (!a.report.empty()) {
    write_json_file(a.report, report);
    ctx.note_output(a.report);
    write_manifest(a.report, ctx);
  }
}

struct InspectArgs {
  std::string path, target;
  std::string pattern = "toy";
};

inline void run_inspect(const InspectArgs& a, Context& ctx) {
  const auto c = load_checkpoint(a.path, ctx);
  json j;
  j["path"] = a.path;
  j["metadata"] = c.metadata();
  json tensors = json::array();
  for (const auto& [name, t] : c.entries())
    tensors.push_back({{"name", name}, {"dtype", std::string(dtype_name(t.dtype()))}, {"shape", t.shape()}});
  j["tensors"] = tensors;
  try {
    const auto view = build_model_view(c, resolve_pattern(a.pattern, ctx));
    json layers = json::array();
    for (const auto& l : view.layers) layers.push_back({{"index", l.index}, {"q", l.q}, {"k", l.k}, {"v", l.v}});
    j["model_view"] = {{"num_layers", view.num_layers()}, {"hidden_size", view.hidden_size}, {"layers", layers}};
  } catch (const Error& e) {
    j["model_view_error"] = e.what();
  }
  if (!a.target.empty()) {
    const auto t = load_checkpoint(a.target, ctx);
    json differs = json::array(), only_here = json::array(), only_target = json::array();
    for (const auto& [name, tensor] : c.entries()) {
      if (!t.contains(name)) only_here.push_back(name);
      else if (!(t.at(name) == tensor)) differs.push_back(name);
    }
    for (const auto& [name, tensor] : t.entries())
      if (!c.contains(name)) only_target.push_back(name);
    j["diff"] = {{"target", a.target}, {"differs", differs}, {"only_in_model", only_here}, {"only_in_target", only_target}};
  }
  ctx.out << j.dump(2) << "\n";
}

struct GenTaskArgs {
  std::string out;
  std::optional<std::uint64_t> seed;
  toy::TaskSpec spec;
};

inline void run_gen_task(const GenTaskArgs& a, Context& ctx) {
  if (!a.seed) throw UsageError("--seed is required");
  ctx.seeds["task"] = *a.seed;
  const auto task = toy::gen_synthetic_task(*a.seed, a.spec);
  write_file_bytes(a.out, task.to_json().dump() + "\n");
  ctx.note_output(a.out);
  ctx.out << json{{"out", a.out}, {"train", task.train.size()}, {"dev", task.dev.size()}, {"test", task.test.size()},
                  {"source_train", task.source_train.size()}}
                 .dump()
          << "\n";
  write_manifest(a.out, ctx);
}

struct TrainFlags {
  double lr = 0.05;
  std::size_t epochs = 10, batch = 16;
  std::string optimizer = "sgd";
  double momentum = 0.9;

  void add(CLI::App* app) {
    app->add_option("--lr", lr, "Learning rate")->capture_default_str();
    app->add_option("--epochs", epochs, "Training epochs")->capture_default_str();
    app->add_option("--batch", batch, "Batch size")->capture_default_str();
    app->add_option("--optimizer", optimizer, "sgd (with momentum) or adam")->capture_default_str();
    app->add_option("--momentum", momentum, "SGD momentum")->capture_default_str();
  }

  toy::TrainHyper hyper(std::uint64_t seed) const {
    toy::TrainHyper h;
    h.lr = lr;
    h.epochs = epochs;
    h.batch = batch;
    h.seed = seed;
    try {
      h.optimizer = toy::parse_optimizer(optimizer);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    h.momentum = momentum;
    return h;
  }
};

inline void write_history(const std::string& path, const std::vector<toy::EpochReport>& history, Context& ctx) {
  if (path.empty()) return;
  std::string lines;
  for (const auto& r : history) lines += r.to_json().dump() + "\n";
  write_file_bytes(path, lines);
  ctx.note_output(path);
}

struct ToyTrainArgs {
  std::string task, variant = "target", init, out, report;
  std::optional<std::uint64_t> seed;
  std::size_t num_layers = 2, hidden = 16, heads = 2, ffn = 32;
  TrainFlags train;
};

inline void run_toy_train(const ToyTrainArgs& a, Context& ctx) {
  if (!a.seed) throw UsageError("--seed is required");
  ctx.seeds["train"] = *a.seed;
  const auto task = load_task(a.task, ctx);
  const auto hyper = a.train.hyper(*a.seed);
  toy::ToyModel initial = a.init.empty()
                              ? toy::ToyModel::init(task.spec.model_config(a.num_layers, a.hidden, a.heads, a.ffn), *a.seed)
                              : toy::from_checkpoint(load_checkpoint(a.init, ctx));
  const auto train = toy_split(task, "train", a.variant);
  const auto dev = toy_split(task, "dev", a.variant);
  const auto result = toy::train_finetune(initial, task, hyper, &train, &dev);
  auto ckpt = toy::to_checkpoint(result.model);
  ckpt.metadata()["toy.variant"] = a.variant;
  ckpt.metadata()["toy.train"] = hyper.to_json().dump();
  ckpt.metadata()["toy.best_dev_error"] = json(result.best_dev_error).dump();
  ckpt.metadata()["toy.best_epoch"] = std::to_string(result.best_epoch);
  write_checkpoint(ckpt, a.out);
  ctx.note_output(a.out);
  write_history(a.report, result.history, ctx);
  ctx.out << json{{"out", a.out}, {"best_dev_error", result.best_dev_error}, {"best_epoch", result.best_epoch}}.dump()
          << "\n";
  write_manifest(a.out, ctx);
}

struct ToyLmamArgs {
  std::string task, source, target, out, target_out, report, scope = "full";
  std::optional<std::uint64_t> seed;
  std::string lambda = "0.05";
  double lambda_lr = 0.5;
  TrainFlags train;
  PatternFlags patterns;
};

inline void run_toy_lmam(const ToyLmamArgs& a, Context& ctx) {
  if (!a.seed) throw UsageError("--seed is required");
  const auto lambdas = parse_lambdas(a.lambda);
  if (lambdas.size() != 1 || lambdas.front() <= 0.0 || lambdas.front() >= 1.0)
    throw UsageError("LambdaOutOfRange: --lambda for train-lmam is one initial value strictly inside (0,1)");
  ctx.seeds["train"] = *a.seed;
  const auto task = load_task(a.task, ctx);
  auto hyper = a.train.hyper(*a.seed);
  hyper.lambda_lr = a.lambda_lr;
  if (a.scope == "full") hyper.scope = toy::LmamScope::Full;
  else if (a.scope == "attention") hyper.scope = toy::LmamScope::AttentionOnly;
  else throw UsageError("--scope must be full or attention");

  const auto source = load_checkpoint(a.source, ctx);
  const auto target = load_checkpoint(a.target, ctx);
  const auto src_model = toy::from_checkpoint(source);
  const auto tgt_model = toy::from_checkpoint(target);
  const auto result = toy::train_lmam(src_model, tgt_model, task, hyper, lambdas.front());

  auto ckpt = toy::to_checkpoint(result.merged);
  auto& md = ckpt.metadata();
  md["mam.mode"] = "learned";
  md["mam.lambda"] = json(result.lambdas).dump();
  md["toy.theta"] = json(result.state.theta).dump();
  md["toy.train"] = hyper.to_json().dump();
  md["toy.best_dev_error"] = json(result.best_dev_error).dump();
  md["toy.best_epoch"] = std::to_string(result.best_epoch);
  md["mam.source_digest"] = checkpoint_digest(source);
  md["mam.target_digest"] = checkpoint_digest(target);
  write_checkpoint(ckpt, a.out);
  ctx.note_output(a.out);
  if (!a.target_out.empty()) {
    write_checkpoint(toy::to_checkpoint(result.target), a.target_out);
    ctx.note_output(a.target_out);
  }
  write_history(a.report, result.history, ctx);
  ctx.out << json{{"out", a.out}, {"lambda", result.lambdas}, {"best_dev_error", result.best_dev_error},
                  {"lmam_scope", a.scope}}
                 .dump()
          << "\n";
  write_manifest(a.out, ctx);
}

struct ToyEvalArgs {
  std::string task, model, split = "test", variant = "target", report;
};

inline void run_toy_eval(const ToyEvalArgs& a, Context& ctx) {
  const auto task = load_task(a.task, ctx);
  const auto model = toy::from_checkpoint(load_checkpoint(a.model, ctx));
  const auto split = toy_split(task, a.split, a.variant);
  const json report{{"error", toy::evaluate(model, split)}, {"split", a.split}, {"variant", a.variant},
                    {"examples", split.size()}};
  ctx.out << report.dump() << "\n";
  if (!a.report.empty()) {
    write_json_file(a.report, report);
    ctx.note_output(a.report);
    write_manifest(a.report, ctx);
  }
}

struct ToyExportArgs {
  std::string task, model, out, split = "dev", variant = "target";
};

inline void run_toy_export(const ToyExportArgs& a, Context& ctx) {
  const auto task = load_task(a.task, ctx);
  const auto model_ckpt = load_checkpoint(a.model, ctx);
  const auto model = toy::from_checkpoint(model_ckpt);
  const auto split = toy_split(task, a.split, a.variant);
  RepresentationSet set{toy::pooled_layer_outputs(model, split)};
  auto ckpt = representations_to_checkpoint(set);
  ckpt.metadata()["reps.split"] = a.split;
  ckpt.metadata()["reps.variant"] = a.variant;
  ckpt.metadata()["reps.model_digest"] = checkpoint_digest(model_ckpt);
  ckpt.metadata()["reps.site"] = "residual stream after each encoder layer, mean over valid positions";
  write_checkpoint(ckpt, a.out);
  ctx.note_output(a.out);
  ctx.out << json{{"out", a.out}, {"layers", set.num_layers()}, {"samples", split.size()}}.dump() << "\n";
  write_manifest(a.out, ctx);
}

int run(std::vector<std::string> args, std::ostream& out, std::ostream& err);

inline int run_rerun(const std::string& manifest_path, Context& ctx) {
  json m;
  try {
    m = json::parse(read_file_bytes(manifest_path));
  } catch (const json::exception& e) {
    fail(ErrorCode::BadSpec, "cannot parse manifest '" + manifest_path + "': " + e.what());
  }
  const auto argv = m.at("argv").get<std::vector<std::string>>();
  ctx.info("re-running: " + m.at("subcommand").get<std::string>());
  return run(argv, ctx.out, ctx.err);
}

// ---------------------------------------------------------------------------

inline const CLI::App* deepest_subcommand(const CLI::App& app) {
  const CLI::App* cur = &app;
  for (;;) {
    auto subs = cur->get_subcommands();
    if (subs.empty()) return cur;
    cur = subs.front();
  }
}

/// Entry point. Exit codes: 0 success, 1 usage error, 2 data or validation error.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  Context ctx{out, err, log_level_from_env(), args};

  CLI::App app{"Attention merging for transformer checkpoints", "mam"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  MergeArgs merge_args;
  auto* merge_cmd = app.add_subcommand("merge", "Interpolate attention Q/K/V of a source into a target checkpoint");
  merge_cmd->add_option("--source", merge_args.source, "Source checkpoint (noise reference for --noise source)");
  merge_cmd->add_option("--target", merge_args.target, "Target checkpoint")->required();
  merge_cmd->add_option("--out", merge_args.out, "Merged checkpoint path")->required();
  merge_cmd->add_option("--lambda", merge_args.lambda, "Interpolation factor in [0,1], or one per layer (comma list)")
      ->required();
  merge_cmd->add_option("--layers", merge_args.layers, "0-based layers to merge: '12-19', '0,4,7' or @report.json");
  merge_cmd->add_flag("--include-bias", merge_args.include_bias, "Also interpolate Q/K/V biases");
  merge_cmd->add_option("--noise", merge_args.noise, "Replace the source by Gaussian noise: source, target or std");
  merge_cmd->add_option("--seed", merge_args.seed, "Noise seed (required with --noise)");
  merge_cmd->add_option("--threads", merge_args.threads, "Worker threads")->capture_default_str();
  merge_cmd->add_option("--report", merge_args.report, "Summary JSON path");
  merge_args.patterns.add(merge_cmd);

  SelectArgs select_args;
  auto* select_cmd = app.add_subcommand("select-layers", "Rank layers by source/target representation similarity");
  select_cmd->add_option("--source", select_args.source, "Source representation file")->required();
  select_cmd->add_option("--target", select_args.target, "Target representation file")->required();
  select_cmd->add_option("--metric", select_args.metric, "euclidean, inner or swd")->capture_default_str();
  select_cmd->add_option("--k", select_args.k, "Number of layers to select")->required();
  select_cmd->add_option("--projections", select_args.projections, "SWD projection count")->capture_default_str();
  select_cmd->add_option("--p", select_args.p, "SWD order")->capture_default_str();
  select_cmd->add_option("--seed", select_args.seed, "Projection seed (required for swd)");
  select_cmd->add_option("--threads", select_args.threads, "Worker threads")->capture_default_str();
  select_cmd->add_option("--report", select_args.report, "Report JSON path");

  GridArgs grid_args;
  auto* grid_cmd = app.add_subcommand("grid-search", "Pick the uniform lambda with the lowest dev error");
  grid_cmd->add_option("--source", grid_args.source, "Source checkpoint");
  grid_cmd->add_option("--target", grid_args.target, "Target (toy) checkpoint");
  grid_cmd->add_option("--grid", grid_args.grid, "Comma list of lambdas")->capture_default_str();
  grid_cmd->add_option("--task", grid_args.task, "Toy task file; merged models are scored on its dev split");
  grid_cmd->add_option("--split", grid_args.split, "Split used with --task")->capture_default_str();
  grid_cmd->add_option("--table", grid_args.table, "Precomputed lambda -> error table (JSON)");
  grid_cmd->add_option("--threads", grid_args.threads, "Worker threads")->capture_default_str();
  grid_cmd->add_option("--report", grid_args.report, "Report JSON path");
  grid_args.patterns.add(grid_cmd);

  AnalyzeArgs analyze_args;
  auto* analyze_cmd = app.add_subcommand("analyze", "WER and character-level improvement breakdown");
  analyze_cmd->add_option("--ref", analyze_args.ref, "Reference transcripts, one per line")->required();
  analyze_cmd->add_option("--baseline", analyze_args.baseline, "Baseline hypotheses")->required();
  analyze_cmd->add_option("--merged", analyze_args.merged, "Merged-model hypotheses")->required();
  analyze_cmd->add_option("--report", analyze_args.report, "Report JSON path");

  InspectArgs inspect_args;
  auto* inspect_cmd = app.add_subcommand("inspect", "Dump a checkpoint header and attention layout");
  inspect_cmd->add_option("path", inspect_args.path, "Checkpoint")->required();
  inspect_cmd->add_option("--target", inspect_args.target, "List tensors that differ from this checkpoint");
  inspect_cmd->add_option("--pattern-config", inspect_args.pattern, "toy, bert, hubert or a JSON file")
      ->capture_default_str();

  std::string manifest;
  auto* rerun_cmd = app.add_subcommand("rerun", "Repeat the command recorded in a manifest");
  rerun_cmd->add_option("--manifest", manifest, "Manifest JSON")->required();

  auto* toy_cmd = app.add_subcommand("toy", "Desk-scale transformer lab");
  toy_cmd->require_subcommand(1);

  GenTaskArgs gen_args;
  auto* gen_cmd = toy_cmd->add_subcommand("gen-task", "Generate a synthetic task and its shifted source variant");
  gen_cmd->add_option("--seed", gen_args.seed, "Generator seed")->required();
  gen_cmd->add_option("--out", gen_args.out, "Task JSON path")->required();
  gen_cmd->add_option("--shift", gen_args.spec.shift, "Source-variant token shift probability")->capture_default_str();
  gen_cmd->add_option("--vocab", gen_args.spec.vocab, "Vocabulary size incl. padding")->capture_default_str();
  gen_cmd->add_option("--classes", gen_args.spec.num_classes, "Class count")->capture_default_str();
  gen_cmd->add_option("--min-len", gen_args.spec.min_len, "Minimum sequence length")->capture_default_str();
  gen_cmd->add_option("--max-len", gen_args.spec.max_len, "Maximum sequence length")->capture_default_str();
  gen_cmd->add_option("--signal", gen_args.spec.signal, "Signature token probability")->capture_default_str();
  gen_cmd->add_option("--n-train", gen_args.spec.n_train, "Target train examples")->capture_default_str();
  gen_cmd->add_option("--n-dev", gen_args.spec.n_dev, "Dev examples")->capture_default_str();
  gen_cmd->add_option("--n-test", gen_args.spec.n_test, "Test examples")->capture_default_str();
  gen_cmd->add_option("--n-source-train", gen_args.spec.n_source_train, "Source train examples")
      ->capture_default_str();

  ToyTrainArgs train_args;
  auto* train_cmd = toy_cmd->add_subcommand("train", "Train or fine-tune a toy model");
  train_cmd->add_option("--task", train_args.task, "Task JSON")->required();
  train_cmd->add_option("--variant", train_args.variant, "target or source")->capture_default_str();
  train_cmd->add_option("--init", train_args.init, "Start from this toy checkpoint instead of a fresh init");
  train_cmd->add_option("--seed", train_args.seed, "Init and shuffling seed")->required();
  train_cmd->add_option("--out", train_args.out, "Output checkpoint")->required();
  train_cmd->add_option("--report", train_args.report, "Per-epoch JSON lines");
  train_cmd->add_option("--num-layers", train_args.num_layers, "Encoder layers")->capture_default_str();
  train_cmd->add_option("--hidden", train_args.hidden, "Model width")->capture_default_str();
  train_cmd->add_option("--heads", train_args.heads, "Attention heads")->capture_default_str();
  train_cmd->add_option("--ffn", train_args.ffn, "Feed-forward width")->capture_default_str();
  train_args.train.add(train_cmd);

  ToyLmamArgs lmam_args;
  auto* lmam_cmd = toy_cmd->add_subcommand("train-lmam", "Fine-tune the target with learnable per-layer gates");
  lmam_cmd->add_option("--task", lmam_args.task, "Task JSON")->required();
  lmam_cmd->add_option("--source", lmam_args.source, "Source toy checkpoint (frozen)")->required();
  lmam_cmd->add_option("--target", lmam_args.target, "Target toy checkpoint")->required();
  lmam_cmd->add_option("--seed", lmam_args.seed, "Shuffling seed")->required();
  lmam_cmd->add_option("--out", lmam_args.out, "Merged output checkpoint")->required();
  lmam_cmd->add_option("--target-out", lmam_args.target_out, "Also write the raw fine-tuned target weights");
  lmam_cmd->add_option("--report", lmam_args.report, "Per-epoch JSON lines");
  lmam_cmd->add_option("--lambda", lmam_args.lambda, "Initial gate value in (0,1)")->capture_default_str();
  lmam_cmd->add_option("--lambda-lr", lmam_args.lambda_lr, "Gate learning rate")->capture_default_str();
  lmam_cmd->add_option("--scope", lmam_args.scope, "Target weights trained: full or attention")->capture_default_str();
  lmam_args.train.add(lmam_cmd);

  ToyEvalArgs eval_args;
  auto* eval_cmd = toy_cmd->add_subcommand("eval", "Classification error of a toy checkpoint");
  eval_cmd->add_option("--task", eval_args.task, "Task JSON")->required();
  eval_cmd->add_option("--model", eval_args.model, "Toy checkpoint")->required();
  eval_cmd->add_option("--split", eval_args.split, "train, dev or test")->capture_default_str();
  eval_cmd->add_option("--variant", eval_args.variant, "target or source")->capture_default_str();
  eval_cmd->add_option("--report", eval_args.report, "Report JSON path");

  ToyExportArgs export_args;
  auto* export_cmd = toy_cmd->add_subcommand("export-reps", "Write pooled per-layer representations");
  export_cmd->add_option("--task", export_args.task, "Task JSON")->required();
  export_cmd->add_option("--model", export_args.model, "Toy checkpoint")->required();
  export_cmd->add_option("--out", export_args.out, "Representation file")->required();
  export_cmd->add_option("--split", export_args.split, "train, dev or test")->capture_default_str();
  export_cmd->add_option("--variant", export_args.variant, "target or source")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << deepest_subcommand(app)->help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << deepest_subcommand(app)->help();
    return 1;
  }

  const CLI::App* leaf = deepest_subcommand(app);
  ctx.command = leaf;
  ctx.command_path = leaf->get_parent() && leaf->get_parent() != &app
                         ? leaf->get_parent()->get_name() + " " + leaf->get_name()
                         : leaf->get_name();
  try {
    if (merge_cmd->parsed()) run_merge(merge_args, ctx);
    else if (select_cmd->parsed()) run_select(select_args, ctx);
    else if (grid_cmd->parsed()) run_grid(grid_args, ctx);
    else if (analyze_cmd->parsed()) run_analyze(analyze_args, ctx);
    else if (inspect_cmd->parsed()) run_inspect(inspect_args, ctx);
    else if (rerun_cmd->parsed()) return run_rerun(manifest, ctx);
    else if (gen_cmd->parsed()) run_gen_task(gen_args, ctx);
    else if (train_cmd->parsed()) run_toy_train(train_args, ctx);
    else if (lmam_cmd->parsed()) run_toy_lmam(lmam_args, ctx);
    else if (eval_cmd->parsed()) run_toy_eval(eval_args, ctx);
    else if (export_cmd->parsed()) run_toy_export(export_args, ctx);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << leaf->help();
    return 1;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace mam::cli

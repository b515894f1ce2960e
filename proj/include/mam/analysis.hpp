// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mam/error.hpp"

namespace mam::analysis {

/// Lowercases ASCII letters, trims, and collapses whitespace runs to one space.
inline std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(c < 0x80 ? std::tolower(c) : c);
  }
  return out;
}

enum class Unit { Char, Word };

/// Splits normalized text into UTF-8 code points (Char) or space-separated words.
inline std::vector<std::string> split_units(std::string_view text, Unit unit) {
  const std::string norm = normalize_text(text);
  std::vector<std::string> out;
  if (unit == Unit::Word) {
    std::size_t start = 0;
    while (start < norm.size()) {
      auto end = norm.find(' ', start);
      if (end == std::string::npos) end = norm.size();
      out.push_back(norm.substr(start, end - start));
      start = end + 1;
    }
    return out;
  }
  for (std::size_t i = 0; i < norm.size();) {
    const auto lead = static_cast<unsigned char>(norm[i]);
    std::size_t len = lead < 0x80 ? 1 : (lead >> 5) == 0x6 ? 2 : (lead >> 4) == 0xE ? 3 : (lead >> 3) == 0x1E ? 4 : 1;
    len = std::min(len, norm.size() - i);
    out.push_back(norm.substr(i, len));
    i += len;
  }
  return out;
}

enum class EditOp { Match, Substitute, Insert, Delete };

inline std::string_view edit_op_name(EditOp op) {
  switch (op) {
    case EditOp::Match: return "match";
    case EditOp::Substitute: return "substitute";
    case EditOp::Insert: return "insert";
    case EditOp::Delete: return "delete";
  }
  return "?";
}

/// One alignment column. Insert: reference unit missing from the hypothesis.
/// Delete: extra hypothesis unit. Positions are -1 on the side a step skips.
struct EditStep {
  EditOp op;
  std::int64_t ref_pos;
  std::int64_t hyp_pos;
};

struct EditCounts {
  std::size_t matches = 0;
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;

  std::size_t distance() const { return substitutions + insertions + deletions; }
};

struct EditScript {
  std::vector<EditStep> steps;
  EditCounts counts;

  std::size_t distance() const { return counts.distance(); }
};

/// Minimal unit-cost alignment turning `hyp` into `ref`. Backtrace prefers the
/// diagonal (match or substitute), then delete, then insert.
inline EditScript align_units(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> cost((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return cost[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i, j - 1) + 1, at(i - 1, j) + 1});

  EditScript script;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      const bool same = ref[i - 1] == hyp[j - 1];
      script.steps.push_back({same ? EditOp::Match : EditOp::Substitute, static_cast<std::int64_t>(i - 1),
                              static_cast<std::int64_t>(j - 1)});
      ++(same ? script.counts.matches : script.counts.substitutions);
      --i;
      --j;
    } else if (j > 0 && at(i, j) == at(i, j - 1) + 1) {
      script.steps.push_back({EditOp::Delete, -1, static_cast<std::int64_t>(j - 1)});
      ++script.counts.deletions;
      --j;
    } else {
      script.steps.push_back({EditOp::Insert, static_cast<std::int64_t>(i - 1), -1});
      ++script.counts.insertions;
      --i;
    }
  }
  std::reverse(script.steps.begin(), script.steps.end());
  return script;
}

inline EditScript levenshtein_align(std::string_view reference, std::string_view hypothesis, Unit unit) {
  return align_units(split_units(reference, unit), split_units(hypothesis, unit));
}

/// Replays `script` on the hypothesis units, yielding the reference units.
inline std::vector<std::string> apply_script(const EditScript& script, const std::vector<std::string>& ref,
                                             const std::vector<std::string>& hyp) {
  std::vector<std::string> out;
  for (const auto& s : script.steps) {
    switch (s.op) {
      case EditOp::Match: out.push_back(hyp.at(static_cast<std::size_t>(s.hyp_pos))); break;
      case EditOp::Substitute:
      case EditOp::Insert: out.push_back(ref.at(static_cast<std::size_t>(s.ref_pos))); break;
      case EditOp::Delete: break;
    }
  }
  return out;
}

/// Corpus WER: total word edits over total reference words.
inline double wer(const std::vector<std::string>& references, const std::vector<std::string>& hypotheses) {
  if (references.size() != hypotheses.size())
    fail(ErrorCode::LengthMismatch, std::to_string(references.size()) + " references vs " +
                                        std::to_string(hypotheses.size()) + " hypotheses");
  std::size_t errors = 0, words = 0;
  for (std::size_t u = 0; u < references.size(); ++u) {
    const auto ref = split_units(references[u], Unit::Word);
    errors += align_units(ref, split_units(hypotheses[u], Unit::Word)).distance();
    words += ref.size();
  }
  if (words == 0) fail(ErrorCode::EmptyReferenceCorpus, "reference corpus has no words");
  return static_cast<double>(errors) / static_cast<double>(words);
}

struct TypeCounts {
  std::size_t insertions = 0;
  std::size_t substitutions = 0;
  std::size_t deletions = 0;

  std::size_t total() const { return insertions + substitutions + deletions; }
};

struct ImprovementBreakdown {
  double insertion_pct = 0.0;
  double substitution_pct = 0.0;
  double deletion_pct = 0.0;
  TypeCounts improvement;  // per-type error reductions, summed over utterances
  TypeCounts regression;   // per-type error increases, reported separately
  TypeCounts baseline_errors;
  TypeCounts merged_errors;
  std::size_t utterances_improved = 0;
  std::size_t utterances_regressed = 0;
  bool has_improvement = false;

  nlohmann::json to_json() const {
    auto counts = [](const TypeCounts& c) {
      return nlohmann::json{{"insertion", c.insertions}, {"substitution", c.substitutions}, {"deletion", c.deletions}};
    };
    return {{"insertion_pct", insertion_pct},
            {"substitution_pct", substitution_pct},
            {"deletion_pct", deletion_pct},
            {"counts", counts(improvement)},
            {"has_improvement", has_improvement},
            {"utterances_improved", utterances_improved},
            {"baseline_char_errors", counts(baseline_errors)},
            {"merged_char_errors", counts(merged_errors)},
            {"regressions", {{"counts", counts(regression)}, {"utterances_regressed", utterances_regressed}}}};
  }
};

/// Attributes character-level error reductions from baseline to merged
/// transcripts to insertion, substitution and deletion. Per utterance and
/// type, only positive reductions count toward the improvement mass.
inline ImprovementBreakdown categorize_improvements(const std::vector<std::string>& refs,
                                                    const std::vector<std::string>& baseline,
                                                    const std::vector<std::string>& merged) {
  if (refs.size() != baseline.size() || refs.size() != merged.size())
    fail(ErrorCode::LengthMismatch, "reference, baseline and merged lists differ in length");
  ImprovementBreakdown out;
  auto delta = [](std::size_t b, std::size_t m, std::size_t& gain, std::size_t& loss) {
    if (b > m) gain += b - m;
    else loss += m - b;
  };
  for (std::size_t u = 0; u < refs.size(); ++u) {
    const auto ref = split_units(refs[u], Unit::Char);
    const auto b = align_units(ref, split_units(baseline[u], Unit::Char)).counts;
    const auto m = align_units(ref, split_units(merged[u], Unit::Char)).counts;
    delta(b.insertions, m.insertions, out.improvement.insertions, out.regression.insertions);
    delta(b.substitutions, m.substitutions, out.improvement.substitutions, out.regression.substitutions);
    delta(b.deletions, m.deletions, out.improvement.deletions, out.regression.deletions);
    out.baseline_errors.insertions += b.insertions;
    out.baseline_errors.substitutions += b.substitutions;
    out.baseline_errors.deletions += b.deletions;
    out.merged_errors.insertions += m.insertions;
    out.merged_errors.substitutions += m.substitutions;
    out.merged_errors.deletions += m.deletions;
    if (m.distance() < b.distance()) ++out.utterances_improved;
    if (m.distance() > b.distance()) ++out.utterances_regressed;
  }
  const auto total = out.improvement.total();
  out.has_improvement = total > 0;
  if (total > 0) {
    const double t = static_cast<double>(total);
    out.insertion_pct = 100.0 * static_cast<double>(out.improvement.insertions) / t;
    out.substitution_pct = 100.0 * static_cast<double>(out.improvement.substitutions) / t;
    out.deletion_pct = 100.0 * static_cast<double>(out.improvement.deletions) / t;
  }
  return out;
}

}  // namespace mam::analysis

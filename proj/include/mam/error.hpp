// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mam {

enum class ErrorCode {
  ShapeMismatch,
  DtypeMismatch,
  LambdaOutOfRange,
  EmptyTensor,
  NegativeVariance,
  NonFiniteValue,
  Io,
  MalformedHeader,
  UnsupportedDtype,
  BadPattern,
  NoLayersFound,
  RaggedLayers,
  ShapeInconsistent,
  LayerCountMismatch,
  IncompatibleModels,
  BadSpec,
  MissingReference,
  EmptySequence,
  SampleCountMismatch,
  DimensionMismatch,
  TooFewSamples,
  UnknownMetric,
  KOutOfRange,
  MisalignedSets,
  ShapeError,
  NonFiniteActivation,
  StaleCache,
  DivergedLoss,
  EmptySplit,
  EmptyGrid,
  LengthMismatch,
  EmptyReferenceCorpus,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DtypeMismatch: return "DtypeMismatch";
    case ErrorCode::LambdaOutOfRange: return "LambdaOutOfRange";
    case ErrorCode::EmptyTensor: return "EmptyTensor";
    case ErrorCode::NegativeVariance: return "NegativeVariance";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::Io: return "Io";
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::BadPattern: return "BadPattern";
    case ErrorCode::NoLayersFound: return "NoLayersFound";
    case ErrorCode::RaggedLayers: return "RaggedLayers";
    case ErrorCode::ShapeInconsistent: return "ShapeInconsistent";
    case ErrorCode::LayerCountMismatch: return "LayerCountMismatch";
    case ErrorCode::IncompatibleModels: return "IncompatibleModels";
    case ErrorCode::BadSpec: return "BadSpec";
    case ErrorCode::MissingReference: return "MissingReference";
    case ErrorCode::EmptySequence: return "EmptySequence";
    case ErrorCode::SampleCountMismatch: return "SampleCountMismatch";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::UnknownMetric: return "UnknownMetric";
    case ErrorCode::KOutOfRange: return "KOutOfRange";
    case ErrorCode::MisalignedSets: return "MisalignedSets";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::StaleCache: return "StaleCache";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::EmptyGrid: return "EmptyGrid";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::EmptyReferenceCorpus: return "EmptyReferenceCorpus";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying a code.
/// The message is prefixed with the code name so CLI diagnostics are greppable.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& detail) { throw Error(code, detail); }

}  // namespace mam

#pragma once

#include <stdexcept>
#include <string>

namespace sao {

enum class ErrorCode {
  // geometry
  CollinearAtoms,
  DegenerateDihedral,
  LengthMismatch,
  // autodiff
  ShapeMismatch,
  NotScalar,
  NonFiniteValue,
  // protein io
  MalformedLine,
  MissingBackboneAtom,
  ChainTooShort,
  SchemaError,
  // synth
  LengthOutOfRange,
  // encoder / heads
  MaskOutOfRange,
  // losses
  DegenerateNorm,
  EmptyMaskSet,
  // trainer
  EmptyDataset,
  MissingCheckpoint,
  IoError,
  FormatVersionMismatch,
  ManifestLengthMismatch,
  // metrics
  NoPositiveLabels,
  DegenerateLabels,
  LabelOutOfRange,
  EmptyInput,
  // generic
  InvalidArgument,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

}  // namespace sao

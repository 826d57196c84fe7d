#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace specprune {

enum class ErrorCode {
  InvalidArgument,
  NonSymmetric,
  NonFinite,
  IndefiniteBeyondTolerance,
  Singular,
  ShapeMismatch,
  IndexOutOfRange,
  DuplicateIndex,
  NonFiniteActivation,
  Io,
  CorruptManifest,
  DivergedLoss,
  BadMagic,
  TruncatedFile,
  ZeroMatrix,
  NegativeLambda,
  ZeroRowNorm,
  AllZeroRows,
  ZeroOperatorNorm,
  UnsupportedLayer,
};

std::string_view to_string(ErrorCode code);

/// Every failure in the library surfaces as this exception; `code()` is the
/// machine-checkable part, `what()` carries the context.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace specprune

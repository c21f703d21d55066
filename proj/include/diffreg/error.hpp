#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace diffreg {

enum class ErrorKind {
  DegenerateConfiguration,
  InvalidWeights,
  InvalidArgument,
  EmptyAnchors,
  KTooLarge,
  NonFiniteInput,
  ZeroMassInput,
  EmptyGroundTruth,
  TimestepOutOfRange,
  TimestepOrder,
  NonFiniteNoise,
  DegenerateAlphaBar,
  ShapeMismatch,
  MissingDescriptors,
  MissingForwardCache,
  InfeasibleOverlap,
  LengthMismatch,
  EmptyDataset,
  Io,
  Format,
};

std::string_view to_string(ErrorKind kind);

/// Single exception type for the library; `kind()` discriminates.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace diffreg

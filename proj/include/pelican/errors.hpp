#pragma once

#include <stdexcept>
#include <string>

namespace pelican {

/// Base class for everything thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad argument values (negative durations, k out of range, ...).
struct InputError : Error {
  using Error::Error;
};

/// Malformed configuration (missing seeds, impossible grids, frozen-everything masks).
struct ConfigError : Error {
  using Error::Error;
};

/// Location-domain violations: unknown ids, target domain not a subset of source.
struct DomainError : Error {
  using Error::Error;
};

/// API contract breaches: width/fingerprint mismatches, sealed-handle serialization.
struct ContractError : Error {
  using Error::Error;
};

/// CSV / JSON parse failures; carries a line number when one is known.
struct ParseError : Error {
  explicit ParseError(const std::string& msg, long line = -1)
      : Error(line >= 0 ? "line " + std::to_string(line) + ": " + msg : msg), line_number(line) {}
  long line_number;
};

/// Train/test split cannot produce at least one window per side.
struct SplitError : Error {
  using Error::Error;
};

/// Cross-validation fold construction impossible for the given data size.
struct FoldError : Error {
  using Error::Error;
};

/// Training preconditions violated (no data, no trainable parameters, ...).
struct TrainingError : Error {
  using Error::Error;
};

/// Model file damage: version mismatch, shape mismatch, truncation.
struct SerializationError : Error {
  using Error::Error;
};

}  // namespace pelican

#pragma once

#include <stdexcept>
#include <string>

namespace seqseg {

// Each error family maps to one CLI exit code (see tools/seqseg.cpp).

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (shape or channel mismatch).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// A NaN/Inf showed up where only finite values are allowed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File system failure. The message always carries the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed data, e.g. a label id outside the class range.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or dataset does not match the requested model.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

#define SEQSEG_REQUIRE(cond, msg)                                   \
  do {                                                              \
    if (!(cond)) throw ::seqseg::ContractViolation(std::string(msg)); \
  } while (0)

}  // namespace seqseg

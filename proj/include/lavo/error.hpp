#pragma once

#include <stdexcept>
#include <string>

namespace lavo {

// Shape or argument mismatch at a public entry point. Messages name the
// offending shapes so failures are diagnosable from the what() string alone.
struct DimError : std::invalid_argument {
  explicit DimError(const std::string& msg) : std::invalid_argument(msg) {}
};

// A softmax row whose entries are all masked out has no valid distribution.
struct DegenerateRowError : std::invalid_argument {
  explicit DegenerateRowError(const std::string& msg) : std::invalid_argument(msg) {}
};

// An internal precondition was violated: caller bug, not a data problem.
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Input data cannot be used: empty context, corpus too small, loss went NaN.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint file problems, split by kind so callers can react differently
// to a foreign file, a future version, and a truncated payload.
struct CheckpointError : std::runtime_error {
  enum class Kind { format, version, corrupt };
  Kind kind;
  CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

// Filesystem failures (open/read/write).
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace lavo

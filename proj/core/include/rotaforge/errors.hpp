#pragma once

#include <stdexcept>
#include <string>

namespace rotaforge {

// Exit-code contract shared by the library and the CLI:
//   0 success, 1 certified-bound failure, 2 configuration error, 3 budget exceeded.
enum class ErrorCode : int {
  certification = 1,
  config = 2,
  budget = 3,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }
  int exit_code() const noexcept { return static_cast<int>(code_); }

 private:
  ErrorCode code_;
};

// Invalid parameters, malformed JSON, violated preconditions.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCode::config, what) {}
};

// A requested certified bound could not be established at the available
// resolution (horizon exhausted, hypothesis violated, search failure, ...).
class CertificationError : public Error {
 public:
  explicit CertificationError(const std::string& what) : Error(ErrorCode::certification, what) {}
};

// An operation would exceed the configured iteration budget.
class BudgetError : public Error {
 public:
  explicit BudgetError(const std::string& what) : Error(ErrorCode::budget, what) {}
};

}  // namespace rotaforge

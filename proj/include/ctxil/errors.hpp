#pragma once

#include <stdexcept>
#include <string>

namespace ctxil {

// Raised when a caller breaks an operation's precondition (shape mismatch,
// empty dictionary, non-scalar loss, ...).
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Raised when a computation produces NaN/Inf or is handed non-finite input.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed files and configs.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

}  // namespace ctxil

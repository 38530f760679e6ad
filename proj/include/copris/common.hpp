#pragma once

#include <stdexcept>
#include <string>

namespace copris {

// Violation of an operation precondition or an internal structural invariant.
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

// Invalid or inconsistent configuration supplied by the caller.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const char* msg) {
  if (!cond) throw ContractViolation(msg);
}

}  // namespace copris

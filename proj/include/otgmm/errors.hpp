#pragma once

#include <stdexcept>
#include <string>

namespace otgmm {

enum class ErrorKind {
  kDomain,          // non-finite evaluator output or invalid argument
  kSingular,        // matrix inversion refused (ill-conditioned)
  kNoRoot,          // implicit transport map has no root
  kConfig,          // user configuration problem
  kData,            // malformed input data
  kSolver,          // iterative solver failed
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

class DomainError : public Error {
 public:
  DomainError(const std::string& what, long row = -1)
      : Error(ErrorKind::kDomain, what), row_(row) {}
  /// Offending observation index, or -1 when not tied to a row.
  long row() const { return row_; }

 private:
  long row_;
};

class SingularError : public Error {
 public:
  SingularError(const std::string& what, double condition)
      : Error(ErrorKind::kSingular, what), condition_(condition) {}
  double condition() const { return condition_; }

 private:
  double condition_;
};

}  // namespace otgmm

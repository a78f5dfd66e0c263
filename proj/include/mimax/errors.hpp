#pragma once

#include <stdexcept>
#include <string>

namespace mimax {

// Shape or rank mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input outside the mathematical domain of an operation (e.g. log of 0).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A row whose L2 norm is too small to normalize.
class DegenerateRowError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class BatchTooSmallError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Contrastive estimators need at least one negative pair per row.
class InsufficientNegativesError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StandardizationError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"),
        message_(what),
        line_(line) {}
  std::size_t line() const { return line_; }
  // Text without the line suffix, for re-wrapping with a file name.
  const std::string& message() const { return message_; }

 private:
  std::string message_;
  std::size_t line_;
};

}  // namespace mimax

#pragma once

#include <stdexcept>
#include <string>

namespace mvsa {

/// Precondition violated by a caller-supplied argument.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Numeric input outside the domain of the operation (e.g. non-positive depth).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Malformed file contents. Carries the byte offset where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_ = 0;
};

/// Inconsistent configuration, e.g. MLP input width vs metadata layout.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid data content (e.g. ground truth marked valid with depth <= 0).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A pipeline stage could not produce a result.
class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mvsa

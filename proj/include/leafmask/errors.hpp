#pragma once

#include <stdexcept>
#include <string>

namespace leafmask {

// Tensor shapes that do not fit an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration values (stride, N > H*W, empty point set, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Values that fail a domain check (negative loss term, non-finite input).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed files. Messages carry the byte offset of the problem.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. calling backward without a recorded forward.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class InvalidBoxError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace leafmask

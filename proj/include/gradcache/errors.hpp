#pragma once

#include <stdexcept>
#include <string>

namespace gradcache {

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Misuse of the differentiation tape (missing graph, mixed tapes, reused grads).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid user-facing configuration or batch description.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A memory counter was asked to release more than it holds.
class MemoryViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Live activation floats exceeded the configured budget.
class BudgetExceeded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gradcache

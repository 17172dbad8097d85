#pragma once

#include <stdexcept>
#include <string>

namespace mclseq {

/// Argument outside the mathematical domain of an operation.
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operand shapes incompatible with the requested op.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Caller violated an interface precondition (e.g. non-scalar loss).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed user input: token ids, files, configuration values.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite or impossible numeric value encountered mid-computation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training diverged (loss blow-up or non-finite gradient).
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Computed quantities violate an ordering they must satisfy.
class ConsistencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mclseq

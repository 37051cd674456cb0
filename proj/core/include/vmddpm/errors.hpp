#pragma once

#include <stdexcept>
#include <string>

namespace vmddpm {

/// Argument outside the mathematical domain of an operation (non-positive
/// step size, timestep out of range, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Tensor shapes that do not agree with an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration values (model, schedule, run config).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller violated a precondition that is not a pure shape problem, e.g.
/// asking for a convolution kernel from time-varying parameters.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing, truncated, corrupt or version-incompatible checkpoint file.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace vmddpm

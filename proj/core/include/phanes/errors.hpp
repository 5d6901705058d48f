#pragma once

#include <stdexcept>
#include <string>

namespace phanes {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or unreadable configuration / arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage ran before the stage it depends on, or a dependency's
/// artifacts no longer match their recorded hashes.
class DependencyError : public Error {
 public:
  using Error::Error;
};

/// Non-finite activations or losses.
class NumericalDivergence : public Error {
 public:
  using Error::Error;
};

/// Checkpoint header or layout does not match what the reader expects.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace phanes

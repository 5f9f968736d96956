#pragma once

#include <stdexcept>
#include <string>

namespace rdc {

// Base for every failure the framework reports. Each subclass maps to one
// CLI exit code (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A precondition of an operation was violated (bad shape, bad label, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class InvalidShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk data: truncated CIFAR records, bad checkpoint layout.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

// Checkpoint payload failed its checksum.
class IntegrityError : public FormatError {
 public:
  using FormatError::FormatError;
};

class DivergedError : public Error {
 public:
  DivergedError(int epoch, long long step, const std::string& what)
      : Error(what), epoch_(epoch), step_(step) {}

  int epoch() const noexcept { return epoch_; }
  long long step() const noexcept { return step_; }

 private:
  int epoch_;
  long long step_;
};

}  // namespace rdc

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ewcdr {

// Base for everything the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Violated precondition of an operation (bad label, out-of-range timestep, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class TypeError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& stage, int epoch, const std::string& what)
      : Error(stage + " diverged at epoch " + std::to_string(epoch) + ": " + what),
        stage_(stage),
        epoch_(epoch) {}
  const std::string& stage() const noexcept { return stage_; }
  int epoch() const noexcept { return epoch_; }

 private:
  std::string stage_;
  int epoch_;
};

}  // namespace ewcdr

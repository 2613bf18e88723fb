#pragma once

#include <stdexcept>
#include <string>

namespace nicon {

// Base class for every error raised by the library. `kind()` is a short
// machine-readable class name used by the CLI when reporting failures.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

// Invalid dimensions, parameters or configuration values. `path` names the
// offending field when the error comes from a config document.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message, std::string path = {})
      : Error("config", path.empty() ? message : path + ": " + message),
        path_(std::move(path)) {}

  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

class SimulationError : public Error {
 public:
  SimulationError(const std::string& message, std::string state)
      : Error("simulation", message + " at state " + state),
        state_(std::move(state)) {}

  const std::string& state() const { return state_; }

 private:
  std::string state_;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& message, int epoch, int batch)
      : Error("training", message + " (epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(batch) + ")"),
        epoch_(epoch),
        batch_(batch) {}

  int epoch() const { return epoch_; }
  int batch() const { return batch_; }

 private:
  int epoch_;
  int batch_;
};

class LoadError : public Error {
 public:
  explicit LoadError(const std::string& message) : Error("load", message) {}
};

class MissingFileError : public Error {
 public:
  explicit MissingFileError(const std::string& path)
      : Error("missing_file", "cannot open " + path) {}
};

class PlantError : public Error {
 public:
  explicit PlantError(const std::string& message) : Error("plant", message) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& message) : Error("domain", message) {}
};

class BaselineError : public Error {
 public:
  explicit BaselineError(const std::string& message)
      : Error("baseline", message) {}
};

}  // namespace nicon

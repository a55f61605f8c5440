#pragma once

#include <stdexcept>
#include <string>

namespace patronus {

// Exit-code convention: 0 ok, 2 config, 3 dependency, 4 training, 5 io.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainingFailure : std::runtime_error {
  explicit TrainingFailure(const std::string& msg) : std::runtime_error(msg) {}
};

struct DependencyError : std::runtime_error {
  explicit DependencyError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const ContractError*>(&e)) return 2;
  if (dynamic_cast<const DimensionError*>(&e)) return 2;
  if (dynamic_cast<const FormatError*>(&e)) return 5;
  if (dynamic_cast<const DependencyError*>(&e)) return 3;
  if (dynamic_cast<const TrainingFailure*>(&e)) return 4;
  if (dynamic_cast<const IoError*>(&e)) return 5;
  return 1;
}

}  // namespace patronus

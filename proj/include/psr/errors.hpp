#pragma once

#include <stdexcept>
#include <string>

namespace psr {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error("ShapeError: " + what) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error("NumericError: " + what) {}
};

struct StateError : std::runtime_error {
  explicit StateError(const std::string& what) : std::runtime_error("StateError: " + what) {}
};

struct IndexError : std::runtime_error {
  explicit IndexError(const std::string& what) : std::runtime_error("IndexError: " + what) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error("DataError: " + what) {}
};

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& what) : std::runtime_error("FormatError: " + what) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error("ConfigError: " + what) {}
};

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& what) : std::runtime_error("TrainError: " + what) {}
};

}  // namespace psr

#pragma once

#include <stdexcept>
#include <string>

namespace cflsim {

/// Invalid configuration or violated precondition. The CLI maps it to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed input data (ragged CSV rows, missing cells, ...). Carries the location in the message.
class DataError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Filesystem failure. The CLI maps it to exit code 3.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ConfigError(what);
}

}  // namespace cflsim

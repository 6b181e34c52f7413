#pragma once

#include <stdexcept>
#include <string>

namespace coinseg {

/// Invalid scenario spec, flag combination, or hyper-parameter.
class ConfigError : public std::runtime_error {
  public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or illegal input data (label values, missing files, extents).
class DataError : public std::runtime_error {
  public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Failure during optimization, e.g. a non-finite loss component.
class TrainingError : public std::runtime_error {
  public:
    explicit TrainingError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace coinseg

#pragma once

#include <stdexcept>
#include <string>

namespace cat {

// Malformed or inconsistent input data (datasets, prediction files, checkpoints).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite loss or gradient; the step that raised it made no parameter update.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration (bad ranges, unknown enum names, unparsable config files).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cat

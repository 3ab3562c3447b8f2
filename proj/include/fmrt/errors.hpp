#pragma once

#include <stdexcept>
#include <string>

namespace fmrt {

// Bad user input: unreadable files, shape mismatches, invalid config values.
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure at runtime: non-finite loss, singular warp.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Robust estimation could not produce a model (too few or degenerate matches).
class EstimationError : public std::runtime_error {
public:
    explicit EstimationError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fmrt

#pragma once

#include <stdexcept>
#include <string>

namespace ftd {

// Validation failures: bad shapes, bad enums, malformed configs/files.
// The CLI maps these to exit code 1.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public ValidationError {
public:
    explicit ShapeError(const std::string& msg) : ValidationError(msg) {}
};

class IoError : public ValidationError {
public:
    explicit IoError(const std::string& msg) : ValidationError(msg) {}
};

class ConfigError : public ValidationError {
public:
    explicit ConfigError(const std::string& msg) : ValidationError(msg) {}
};

// Numerical failures: NaN/Inf results, diverging training runs, degenerate
// inputs to numeric routines. The CLI maps these to exit code 2.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

class NonFiniteError : public NumericalError {
public:
    explicit NonFiniteError(const std::string& msg) : NumericalError(msg) {}
};

} // namespace ftd

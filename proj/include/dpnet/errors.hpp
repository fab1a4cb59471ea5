#pragma once

#include <stdexcept>
#include <string>

namespace dpnet {

// Invalid tensor shapes (dimension mismatch, bad conv geometry).
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration (divisibility violations, bad hyperparameters).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Validation failures on data contents (non-binary masks, checkpoint hash mismatch).
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// File I/O and parse failures.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dpnet

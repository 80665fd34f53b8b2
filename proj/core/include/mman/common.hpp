#pragma once

#include <stdexcept>
#include <string>

namespace mman {

// Shape/extent mismatch between tensors or between a tensor and an op.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A precondition of an operation was violated by the caller.
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or insufficient input data (files, price history, ...).
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid run configuration (bad key, inconsistent dimensions, ...).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure at runtime (NaN loss, non-finite gradient).
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace mman

#pragma once

#include <stdexcept>
#include <string>

namespace dml {

// Base of every error thrown by the library. The C API maps each subclass to
// a distinct status code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor extents or vector lengths that do not line up.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Invalid hyperparameters, layer specs or experiment settings.
class ConfigError : public Error {
public:
    using Error::Error;
};

// NaN/Inf encountered during training or an update step.
class NumericError : public Error {
public:
    using Error::Error;
};

// File missing, truncated, or with a bad magic/version.
class IoError : public Error {
public:
    using Error::Error;
};

// Data that violates a domain invariant (trajectory geometry, split sizes...).
class InvariantError : public Error {
public:
    using Error::Error;
};

}  // namespace dml

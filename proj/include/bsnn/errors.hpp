#pragma once

#include <stdexcept>
#include <string>

namespace bsnn {

// Error hierarchy. The CLI maps ValidationError-derived failures to exit
// code 2 and IoError to exit code 3.

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

/// Operand shapes do not conform.
class DimensionError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Layer hyper-parameters cannot produce a valid output.
class ConfigError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Values outside the mathematical domain of an operation.
class DomainError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ShapeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class StructureError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class VersionError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class FormatError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Blob extends past the end of weights.bin.
class TruncationError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Training loss became NaN or infinite.
class DivergenceError : public Error {
public:
    using Error::Error;
};

} // namespace bsnn

#pragma once

#include <stdexcept>
#include <string>

namespace mspcaps {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes (broadcast, matmul, conv channel mismatch, ...).
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Axis argument outside [-rank, rank).
class AxisError : public Error {
public:
    using Error::Error;
};

/// Argument outside the mathematical domain of an op (log/sqrt of a negative).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Violated precondition of an operation.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated input file.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Dataset or artifact file that cannot be opened or written.
class IoError : public Error {
public:
    using Error::Error;
};

/// Checkpoint written for another format version or model configuration.
class IncompatibleError : public Error {
public:
    using Error::Error;
};

/// Invalid run or model configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace mspcaps

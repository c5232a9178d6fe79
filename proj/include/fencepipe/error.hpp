#pragma once

#include <stdexcept>
#include <string>

namespace fencepipe {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shape or image dimension disagreement.
class DimensionError : public Error {
public:
    using Error::Error;
};

class EmptyInputError : public DimensionError {
public:
    using DimensionError::DimensionError;
};

// Caller violated a precondition (non-scalar backward, missing grads, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// Bad or missing input data. Maps to CLI exit status 1.
class DataError : public Error {
public:
    using Error::Error;
};

class ParseError : public DataError {
public:
    ParseError(const std::string& what, std::size_t line, std::string field)
        : DataError(what), line_(line), field_(std::move(field)) {}

    std::size_t line() const { return line_; }
    const std::string& field() const { return field_; }

private:
    std::size_t line_;
    std::string field_;
};

class SpecError : public DataError {
public:
    using DataError::DataError;
};

class IoError : public DataError {
public:
    using DataError::DataError;
};

class CorruptionError : public DataError {
public:
    using DataError::DataError;
};

class VersionError : public DataError {
public:
    using DataError::DataError;
};

class NumericError : public Error {
public:
    using Error::Error;
};

// Invalid configuration or usage. Maps to CLI exit status 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace fencepipe

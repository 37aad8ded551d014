// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace loraforge {

// Root of every error the library throws. The CLI maps UsageError
// subclasses to exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller supplied an invalid configuration or argument.
class UsageError : public Error {
public:
    using Error::Error;
};

class ConfigError : public UsageError {
public:
    using UsageError::UsageError;
};

class DimensionError : public UsageError {
public:
    using UsageError::UsageError;
};

class InputError : public UsageError {
public:
    using UsageError::UsageError;
};

class CompositionError : public UsageError {
public:
    using UsageError::UsageError;
};

class LookupError : public UsageError {
public:
    using UsageError::UsageError;
};

// A precondition of an operation was violated (empty loss mask, non-scalar
// backward root, empty trainable set, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Checkpoint validation failures. Each kind is distinct so callers can tell
// a stale format from a damaged file.
class VersionError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class TilingError : public Error {
public:
    using Error::Error;
};

}  // namespace loraforge

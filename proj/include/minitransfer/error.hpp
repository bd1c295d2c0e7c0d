#pragma once

#include <stdexcept>
#include <string>

namespace mt {

// Base for everything the toolkit throws. The CLI maps exception types to
// exit codes: ConfigError -> 2, DataError -> 3, anything else -> 4.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// Bad argument values: out-of-range indices, non-positive temperatures, ...
struct ValueError : Error {
    using Error::Error;
};

// Invalid configuration (schemas, incompatible layer dims, unknown modes).
struct ConfigError : Error {
    using Error::Error;
};

// Problems with input data or on-disk artifacts.
struct DataError : Error {
    using Error::Error;
};

// Checkpoint load failures, split by cause so callers can tell them apart.
struct CheckpointError : DataError {
    using DataError::DataError;
};
struct VersionError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct DigestError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct TruncatedError : CheckpointError {
    using CheckpointError::CheckpointError;
};

// Registry lookups and manifest problems.
struct RegistryError : DataError {
    using DataError::DataError;
};

}  // namespace mt

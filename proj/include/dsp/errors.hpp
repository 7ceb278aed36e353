#pragma once

#include <stdexcept>
#include <string>

namespace dsp {

// Error taxonomy shared by the whole library. The CLI maps these onto exit
// codes: ConfigError -> 2, DataError (and ParseError) -> 3, DivergenceError -> 4.

// Tensor shapes do not compose (messages carry both shapes).
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An index (gather list, filter id, ...) is out of range.
struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Math domain violation: sqrt of a negative, log of a non-positive, ...
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration value or config file.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A request exceeds a hard capacity guard (e.g. brute-force enumeration size).
struct CapacityError : ConfigError {
    using ConfigError::ConfigError;
};

// Dataset-level inconsistency (count mismatch between images and labels, ...).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed file content: bad magic, version mismatch, truncation.
struct ParseError : DataError {
    using DataError::DataError;
};

// A pruned/compiled structure is internally inconsistent.
struct StructureError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API contract violation (e.g. backward on a non-scalar).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

} // namespace dsp

#pragma once

#include <stdexcept>
#include <string>

namespace petdiff {

// Error taxonomy. The CLI maps these onto its exit codes:
//   ConfigError (and VersionError) -> 2, IoError/FormatError/DataError -> 3,
//   NumericError -> 4, MissingInputsError -> 5.

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

// Checkpoint/container version tag not supported.
struct VersionError : ConfigError {
    explicit VersionError(const std::string& m) : ConfigError(m) {}
};

// Shape/dimension mismatch between tensors.
struct DimError : std::runtime_error {
    explicit DimError(const std::string& m) : std::runtime_error(m) {}
};

// Step/label index out of its valid range.
struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& m) : std::runtime_error(m) {}
};

// Malformed or inconsistent input data (unknown label, OOV token, ...).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& m) : std::runtime_error(m) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

// File exists but its contents do not match the declared layout.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& m) : std::runtime_error(m) {}
};

// NaN/Inf surfaced from a numeric computation.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

// API contract violated by the caller (backward on non-scalar, ...).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& m) : std::logic_error(m) {}
};

// Metric preconditions violated (empty mask, image smaller than window).
struct MetricError : std::runtime_error {
    explicit MetricError(const std::string& m) : std::runtime_error(m) {}
};

// Too few paired observations for a statistical test.
struct InsufficientDataError : std::runtime_error {
    explicit InsufficientDataError(const std::string& m) : std::runtime_error(m) {}
};

// Required inputs absent (eval without denoised outputs).
struct MissingInputsError : std::runtime_error {
    explicit MissingInputsError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace petdiff

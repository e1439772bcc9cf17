#pragma once

#include <stdexcept>
#include <string>

namespace mose {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/extent violations in tensor ops.
struct DimensionError : Error { using Error::Error; };

// Caller-supplied values outside the documented domain.
struct InputError : Error { using Error::Error; };

// Inputs that are syntactically fine but numerically unusable (zero norms etc).
struct DegenerateInputError : InputError { using InputError::InputError; };

// Invalid run/adapter/backbone configuration.
struct ConfigError : Error { using Error::Error; };

// API contract violations: stale masks, duplicate snapshots, out-of-order calls.
struct ContractError : Error { using Error::Error; };

// Malformed text inputs (config files, dataset files).
struct ParseError : Error { using Error::Error; };

struct IoError : Error { using Error::Error; };

// Training-loop failures (non-finite loss etc).
struct TrainError : Error { using Error::Error; };

// Numeric evaluation failures inside verification utilities.
struct EvalError : Error { using Error::Error; };

struct CheckpointError : Error { using Error::Error; };
struct ChecksumError : CheckpointError { using CheckpointError::CheckpointError; };
struct VersionError : CheckpointError { using CheckpointError::CheckpointError; };
struct TruncationError : CheckpointError { using CheckpointError::CheckpointError; };

} // namespace mose

#pragma once

#include <stdexcept>
#include <string>

namespace desklm {

// Base class for everything the engine throws on purpose. The CLI maps
// these to exit code 2; anything escaping past it is a bug.
struct EngineError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid argument or state that violates an operation's contract.
struct DomainError : EngineError {
    using EngineError::EngineError;
};

// Malformed external input (rank files, config files, token streams).
struct ParseError : EngineError {
    using EngineError::EngineError;
};

// Structurally valid input whose content breaks an invariant
// (duplicate ranks, missing byte tokens, inconsistent shapes).
struct IntegrityError : EngineError {
    using EngineError::EngineError;
};

// File-system level failure: missing path, short read, failed write.
struct IoError : EngineError {
    using EngineError::EngineError;
};

// Checkpoint loading keeps the failure kinds distinct so callers and
// tests can tell a wrong file from a damaged one.
struct CheckpointError : EngineError {
    enum class Kind { bad_magic, bad_version, truncated, bad_tensor };
    Kind kind;
    CheckpointError(Kind k, const std::string& msg) : EngineError(msg), kind(k) {}
};

// Thrown by the trainer when the loss stops being a number.
struct NonFiniteLossError : EngineError {
    using EngineError::EngineError;
};

} // namespace desklm

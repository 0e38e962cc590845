#pragma once

#include <stdexcept>
#include <string>

namespace fairqueue {

enum class ErrorKind {
    InvalidInput,
    DegenerateDirection,
    UnsupportedResize,
    InvalidMatrix,
    EmptyCategory,
    InvalidSelection,
    InvalidPrompt,
    TrajectoryExhausted,
    InvalidSchedule,
    NotFinal,
    InvalidStep,
    InvalidWindow,
    InvalidToken,
    DegenerateMap,
    EmptySample,
    DegenerateFeature,
    MissingPair,
    Config,
    Io,
    Format,
    LengthMismatch,
    UnsupportedVersion,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidInput: return "invalid-input";
        case ErrorKind::DegenerateDirection: return "degenerate-direction";
        case ErrorKind::UnsupportedResize: return "unsupported-resize";
        case ErrorKind::InvalidMatrix: return "invalid-matrix";
        case ErrorKind::EmptyCategory: return "empty-category";
        case ErrorKind::InvalidSelection: return "invalid-selection";
        case ErrorKind::InvalidPrompt: return "invalid-prompt";
        case ErrorKind::TrajectoryExhausted: return "trajectory-exhausted";
        case ErrorKind::InvalidSchedule: return "invalid-schedule";
        case ErrorKind::NotFinal: return "not-final";
        case ErrorKind::InvalidStep: return "invalid-step";
        case ErrorKind::InvalidWindow: return "invalid-window";
        case ErrorKind::InvalidToken: return "invalid-token";
        case ErrorKind::DegenerateMap: return "degenerate-map";
        case ErrorKind::EmptySample: return "empty-sample";
        case ErrorKind::DegenerateFeature: return "degenerate-feature";
        case ErrorKind::MissingPair: return "missing-pair";
        case ErrorKind::Config: return "config";
        case ErrorKind::Io: return "io";
        case ErrorKind::Format: return "format";
        case ErrorKind::LengthMismatch: return "length-mismatch";
        case ErrorKind::UnsupportedVersion: return "unsupported-version";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

// Process exit code for the CLI: 2 config, 3 I/O, 4 numeric degeneracy.
inline int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Io:
        case ErrorKind::Format:
        case ErrorKind::LengthMismatch:
        case ErrorKind::UnsupportedVersion:
            return 3;
        case ErrorKind::DegenerateDirection:
        case ErrorKind::DegenerateMap:
        case ErrorKind::DegenerateFeature:
        case ErrorKind::InvalidMatrix:
        case ErrorKind::EmptySample:
            return 4;
        default:
            return 2;
    }
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace fairqueue

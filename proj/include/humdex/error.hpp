#pragma once

#include <stdexcept>
#include <string>

namespace humdex {

// Error taxonomy shared by all modules. The CLI maps kinds to exit codes:
// usage errors are handled by the argument parser, Schema/Mapping/Parse/
// Protocol/Io/Calibration/Validation map to exit 2, Numeric to exit 3.
enum class ErrorKind {
    Schema,       // malformed model/config documents
    Dimension,    // vector/matrix size mismatch
    Mapping,      // human<->robot link pairing refers to a missing link
    Parse,        // unreadable JSON / JSONL line
    Protocol,     // pedal trigger sequence violations
    Io,           // missing or partial files
    Calibration,  // degenerate calibration input
    Validation,   // invariant violation in input data
    Numeric,      // non-finite values where finite required
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

  private:
    ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Schema: return "schema";
        case ErrorKind::Dimension: return "dimension";
        case ErrorKind::Mapping: return "mapping";
        case ErrorKind::Parse: return "parse";
        case ErrorKind::Protocol: return "protocol";
        case ErrorKind::Io: return "io";
        case ErrorKind::Calibration: return "calibration";
        case ErrorKind::Validation: return "validation";
        case ErrorKind::Numeric: return "numeric";
    }
    return "unknown";
}

}  // namespace humdex

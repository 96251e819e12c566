#pragma once

#include <stdexcept>
#include <string>

namespace signbart {

// Error taxonomy shared by the whole library. The CLI maps validation-style
// kinds to exit code 1 and runtime-style kinds to exit code 2.
enum class ErrorKind {
    dimension,  // shape / rank / length mismatches
    parameter,  // invalid argument values
    contract,   // caller broke an API precondition
    numeric,    // NaN / Inf detected
    schema,     // malformed files or configs
    state,      // wrong normalization / pipeline state
    io,         // filesystem failures
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::dimension: return "dimension";
        case ErrorKind::parameter: return "parameter";
        case ErrorKind::contract: return "contract";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::schema: return "schema";
        case ErrorKind::state: return "state";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

inline bool is_validation_error(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::dimension:
        case ErrorKind::parameter:
        case ErrorKind::contract:
        case ErrorKind::schema:
        case ErrorKind::state:
            return true;
        case ErrorKind::numeric:
        case ErrorKind::io:
            return false;
    }
    return false;
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message),
          kind_(kind),
          message_(message) {}

    ErrorKind kind() const noexcept { return kind_; }
    const std::string& message() const noexcept { return message_; }

private:
    ErrorKind kind_;
    std::string message_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& m) : Error(ErrorKind::dimension, m) {}
};
struct ParameterError : Error {
    explicit ParameterError(const std::string& m) : Error(ErrorKind::parameter, m) {}
};
struct ContractError : Error {
    explicit ContractError(const std::string& m) : Error(ErrorKind::contract, m) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& m) : Error(ErrorKind::numeric, m) {}
};
struct SchemaError : Error {
    explicit SchemaError(const std::string& m) : Error(ErrorKind::schema, m) {}
};
struct StateError : Error {
    explicit StateError(const std::string& m) : Error(ErrorKind::state, m) {}
};
struct IoError : Error {
    explicit IoError(const std::string& m) : Error(ErrorKind::io, m) {}
};

}  // namespace signbart

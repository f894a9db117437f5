#pragma once

#include <stdexcept>
#include <string>

namespace mend {

// Every failure raised by the library derives from Error so callers can catch
// one type. The CLI maps the concrete kinds onto stable exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand dimensions do not agree.
struct ShapeError : Error {
    using Error::Error;
};

// Class label or layer id out of range.
struct IndexError : Error {
    using Error::Error;
};

// Invalid configuration value (exit code 2).
struct ConfigError : Error {
    using Error::Error;
};

// Malformed or inconsistent input data (exit code 3).
struct DataError : Error {
    using Error::Error;
};

// Caller broke an API precondition, e.g. a stale forward trace (exit code 4).
struct ContractError : Error {
    using Error::Error;
};

// A NaN or Inf escaped a computation.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace mend

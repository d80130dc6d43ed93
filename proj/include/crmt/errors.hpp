#pragma once

#include <stdexcept>
#include <string>

namespace crmt {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible matrix/tensor dimensions.
struct ShapeError : Error {
    using Error::Error;
};

// A non-finite value appeared during evaluation.
struct OverflowError : Error {
    using Error::Error;
};

// API misuse (e.g. backward before forward, invalid arguments).
struct UsageError : Error {
    using Error::Error;
};

// Malformed input file.
struct ParseError : Error {
    using Error::Error;
};

// A structural invariant was violated (orthonormality, manifest mismatch, ...).
struct IntegrityError : Error {
    using Error::Error;
};

// Degenerate model quantities (identical classifier rows, zero denominators).
struct DegenerateError : Error {
    using Error::Error;
};

// Training loss became non-finite.
struct DivergenceError : Error {
    using Error::Error;
};

// Bad experiment configuration.
struct ConfigError : Error {
    using Error::Error;
};

} // namespace crmt

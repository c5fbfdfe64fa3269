#ifndef LEAKLAB_ERRORS_HPP
#define LEAKLAB_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace leaklab {

// Error taxonomy. The CLI maps these onto process exit codes:
//   ConfigError -> 2, data-class errors -> 3, numeric-class -> 4, FormatError -> 5.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Matrix/vector dimension disagreement.
struct ShapeError : Error {
    using Error::Error;
};

// Precondition violated by a caller-supplied value.
struct ArgumentError : Error {
    using Error::Error;
};

// NaN/Inf or divergence detected.
struct NumericError : Error {
    using Error::Error;
};

// File could not be read or written.
struct IoError : Error {
    using Error::Error;
};

// A dotted submodule/weight path did not resolve.
struct PathError : Error {
    using Error::Error;
};

// Operation invoked in the wrong object state (e.g. double merge).
struct StateError : Error {
    using Error::Error;
};

// Malformed checkpoint, report, or schema violation.
struct FormatError : Error {
    using Error::Error;
};

// Secret could not be corrupted into a distinct string.
struct CorruptionError : Error {
    using Error::Error;
};

// Bad run configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed input data file.
struct DataError : Error {
    using Error::Error;
};

} // namespace leaklab

#endif

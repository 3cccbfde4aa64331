#pragma once

#include <stdexcept>
#include <string>

namespace mnad {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid tensor extents for an op; message names the op and the extents.
struct ShapeError : Error {
    using Error::Error;
};

// Bad user configuration (CLI flags, config file, preset mismatch).
struct ConfigError : Error {
    using Error::Error;
};

// Dataset problems: missing frames, malformed PGM, label indices out of range.
struct DataError : Error {
    using Error::Error;
};

// Malformed or truncated binary files (checkpoints).
struct IoError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required; training aborts on these.
struct NumericError : Error {
    using Error::Error;
};

} // namespace mnad

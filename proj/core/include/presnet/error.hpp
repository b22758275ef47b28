#pragma once

#include <stdexcept>
#include <string>

namespace presnet {

// Base for everything this library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violated precondition or shape/curvature mismatch.
struct ContractError : Error {
    using Error::Error;
};

// Malformed file on disk (checkpoint, dataset, config).
struct FormatError : Error {
    using Error::Error;
};

// A verification oracle could not produce a trustworthy value.
struct OracleError : Error {
    using Error::Error;
};

// Iterative solver failed to converge; message carries diagnostics.
struct DivergedError : Error {
    using Error::Error;
};

} // namespace presnet

#pragma once

#include <stdexcept>
#include <string>

namespace t2p {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed input: a file or byte sequence that does not parse.
struct ParseError : Error {
    using Error::Error;
};

/// Well-formed input that breaks an invariant (range, uniqueness, arity).
struct ValidationError : Error {
    using Error::Error;
};

/// Operand shapes that an operation cannot combine.
struct ShapeError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

/// Numerical blow-up during training or optimization.
struct DivergenceError : Error {
    using Error::Error;
};

}  // namespace t2p

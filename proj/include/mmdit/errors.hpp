#pragma once

#include <stdexcept>
#include <string>

namespace mmdit {

// Base of every error the engine raises. The CLI maps the first group to
// exit status 1 (input/config) and the second group to exit status 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};
struct InputError : Error {
    using Error::Error;
};
struct PlanError : Error {
    using Error::Error;
};
struct ParseError : Error {
    using Error::Error;
};
struct SelectionError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};
struct TrainingError : NumericError {
    using NumericError::NumericError;
};

}  // namespace mmdit

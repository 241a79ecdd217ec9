#pragma once

#include <stdexcept>
#include <string>

namespace ebfkit {

// Bad user input: malformed formula, missing column, invalid configuration.
// The CLI maps this to exit code 2.
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A computation that could not be completed (failed factorization,
// divergent chain, non-convergence). The CLI maps this to exit code 3.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace ebfkit

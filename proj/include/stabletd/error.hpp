#pragma once

#include <stdexcept>
#include <string>

namespace stabletd {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Precondition violation: bad shape, bad rank, bad option value.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

// A residual bound cannot be met at the current rank/factors.
class InfeasibleBound : public Error {
public:
    InfeasibleBound(const std::string& what, double min_residual)
        : Error(what), min_residual_(min_residual) {}

    // Smallest residual (Frobenius norm, not squared) achievable by the subproblem.
    double min_residual() const noexcept { return min_residual_; }

private:
    double min_residual_;
};

class ConvergenceError : public Error {
public:
    using Error::Error;
};

// Malformed tensor or block file.
class FormatError : public Error {
public:
    using Error::Error;
};

// External evaluator broke its contract (nonzero exit, unparsable score).
class EvaluatorError : public Error {
public:
    EvaluatorError(const std::string& what, std::string captured)
        : Error(what), captured_(std::move(captured)) {}

    const std::string& captured_output() const noexcept { return captured_; }

private:
    std::string captured_;
};

}  // namespace stabletd

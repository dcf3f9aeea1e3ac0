#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace spikesync {

// Base of every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class IoError : public Error {
public:
    using Error::Error;
};

// IRLS or IPF exhausted its iteration budget.
class ConvergenceError : public Error {
public:
    using Error::Error;
};

// Separation or unbounded coefficient drift in a Poisson fit.
class FitError : public Error {
public:
    using Error::Error;
};

// Expected joint count of zero, or a test in which every replicate is undefined.
class DegenerateError : public Error {
public:
    using Error::Error;
};

// Inclusion-exclusion produced a negative cell.
class InfeasibleTableError : public Error {
public:
    InfeasibleTableError(const std::string& what, std::size_t trial, std::size_t bin)
        : Error(what), trial_(trial), bin_(bin) {}
    std::size_t trial() const noexcept { return trial_; }
    std::size_t bin() const noexcept { return bin_; }

private:
    std::size_t trial_;
    std::size_t bin_;
};

// lambda * delta >= 1: the bin width is too coarse for a Bernoulli approximation.
class ResolutionError : public Error {
public:
    using Error::Error;
};

class InsufficientEventsError : public Error {
public:
    using Error::Error;
};

// Thinning bound exceeded or an ill-formed process specification.
class SimulationError : public Error {
public:
    using Error::Error;
};

}  // namespace spikesync

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace camm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid user input: shapes, ids, degenerate data.
class InputError : public Error {
public:
    using Error::Error;
};

/// A value left the domain of a transformation step (e.g. log of a non-positive number).
class DomainError : public Error {
public:
    DomainError(const std::string& what, std::size_t index)
        : Error(what + " (sample " + std::to_string(index) + ")"), index_(index) {}

    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

/// Numerical breakdown: singular systems, non-finite likelihoods.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace camm

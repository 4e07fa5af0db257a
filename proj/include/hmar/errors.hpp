#pragma once

#include <stdexcept>
#include <string>

namespace hmar {

/// Tensor shapes that do not conform to an operation's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Argument outside an operation's mathematical domain (gate weights, boxes, knots...).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// NaN/Inf encountered during evaluation.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or unreadable file (checkpoint, code database, manifest, image).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace hmar

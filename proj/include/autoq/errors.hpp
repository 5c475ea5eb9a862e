#pragma once

#include <stdexcept>
#include <string>

namespace autoq {

/// Malformed input document (JSON syntax, missing/ill-typed fields).
class ParseError : public std::runtime_error {
public:
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A domain invariant does not hold (shapes, ranges, cross-field rules).
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Resource budget cannot be met even by the all-minimum policy.
class InfeasibleBudgetError : public std::runtime_error {
public:
    explicit InfeasibleBudgetError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Exhaustive search space exceeds the enforced enumeration cap.
class SpaceTooLargeError : public std::runtime_error {
public:
    explicit SpaceTooLargeError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace autoq

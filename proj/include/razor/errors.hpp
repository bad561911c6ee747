// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace razor {

// Base for every data-level failure raised by the library. Argument/contract
// violations use std::invalid_argument instead.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad magic, unsupported version, malformed text.
class FormatError : public Error {
public:
    using Error::Error;
};

class TruncationError : public Error {
public:
    using Error::Error;
};

// A tensor or head id does not fit the model geometry.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A sequence would exceed the model's maximum context.
class ContextOverflowError : public Error {
public:
    using Error::Error;
};

class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double last_estimate)
        : Error(what), m_last_estimate(last_estimate) {}

    double last_estimate() const { return m_last_estimate; }

private:
    double m_last_estimate;
};

}  // namespace razor

#pragma once

#include <stdexcept>
#include <string>

namespace diffseg {

// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid argument values (ranges, orderings, empty inputs).
class ParameterError : public Error {
public:
    using Error::Error;
};

// Tensor shape mismatches.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Operation called on an object in the wrong state (uninitialized model,
// violated freeze contract).
class StateError : public Error {
public:
    using Error::Error;
};

// Unknown category name.
class VocabularyError : public Error {
public:
    using Error::Error;
};

// Malformed input data (e.g. label value out of range).
class DataError : public Error {
public:
    using Error::Error;
};

// Filesystem failures.
class IoError : public Error {
public:
    using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

// Unreadable or version-mismatched serialized artifacts.
class FormatError : public Error {
public:
    using Error::Error;
};

} // namespace diffseg

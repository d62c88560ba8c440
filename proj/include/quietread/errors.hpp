#pragma once

#include <stdexcept>
#include <string>

namespace quietread {

// Base for every error raised by the library. The CLI maps subclasses onto
// stable exit codes (config 2, numeric 3, io 4).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Raised by cross_entropy_masked when no position contributes to the loss.
class AllMaskedError : public Error {
public:
    using Error::Error;
};

}  // namespace quietread

#pragma once

#include <stdexcept>
#include <string>

namespace mac {

/// Base of every error raised by the library. The concrete subclass tells the
/// caller which stage of the pipeline rejected the request.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid or degenerate configuration values.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error("configuration error: " + what) {}
};

/// Tensor shapes or ids that do not match what an operation expects.
class InputError : public Error {
public:
    explicit InputError(const std::string& what) : Error("input error: " + what) {}
};

/// Corrupt or missing files on disk.
class LoadError : public Error {
public:
    explicit LoadError(const std::string& what) : Error("load error: " + what) {}
};

/// NaN/Inf encountered during optimization.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error("numeric error: " + what) {}
};

/// An operation was invoked before its prerequisites exist.
class StateError : public Error {
public:
    explicit StateError(const std::string& what) : Error("state error: " + what) {}
};

} // namespace mac

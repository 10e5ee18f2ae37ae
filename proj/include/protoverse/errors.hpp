#pragma once

#include <stdexcept>
#include <string>

namespace protoverse {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Array dimensions disagree with what an operation requires.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
public:
    ConfigError(std::string path, const std::string& message)
        : Error(path.empty() ? message : path + ": " + message), path_(std::move(path)), detail_(message) {}
    explicit ConfigError(const std::string& message) : ConfigError("", message) {}

    const std::string& path() const noexcept { return path_; }
    /// The message without the path prefix.
    const std::string& detail() const noexcept { return detail_; }

private:
    std::string path_;
    std::string detail_;
};

/// Dataset contents violate a precondition (missing class, empty set, bad file).
class DataError : public Error {
public:
    using Error::Error;
};

/// Operation invoked on a model in the wrong training stage.
class StageError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace protoverse

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace reviewrec {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& message) : std::runtime_error(message) {}
};

/// Bad configuration, unknown format id, invalid parameters.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A single input record failed validation. Carries its 1-based line number.
class RecordError : public Error {
public:
    RecordError(std::size_t line, const std::string& message)
        : Error("line " + std::to_string(line) + ": " + message), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class TemplateError : public Error {
public:
    using Error::Error;
};

class StorageError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

}  // namespace reviewrec

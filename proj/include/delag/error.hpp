#pragma once

#include <stdexcept>
#include <string>

namespace delag {

// All library failures surface as one of these. The message always starts
// with a stable machine-parseable prefix ("format error:", "validation
// error:", ...) so callers can route on it without string surgery.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FormatError : Error {
    explicit FormatError(const std::string& what) : Error("format error: " + what) {}
};

struct TruncationError : Error {
    explicit TruncationError(const std::string& what) : Error("truncation error: " + what) {}
};

struct ValidationError : Error {
    explicit ValidationError(const std::string& what) : Error("validation error: " + what) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
};

struct IoError : Error {
    explicit IoError(const std::string& what) : Error("io error: " + what) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error("numeric error: " + what) {}
};

struct DomainError : Error {
    explicit DomainError(const std::string& what) : Error("domain error: " + what) {}
};

} // namespace delag

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ecgstress {

// Coarse failure category; the CLI maps each one to a distinct exit code.
enum class ErrorKind { argument, dimension, config, data, format, numeric, unsupported };

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::argument: return "argument";
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::config: return "config";
    case ErrorKind::data: return "data";
    case ErrorKind::format: return "format";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::unsupported: return "unsupported";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct ArgumentError : Error {
    explicit ArgumentError(const std::string& what) : Error(ErrorKind::argument, what) {}
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& what) : Error(ErrorKind::dimension, what) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

struct UnsupportedError : Error {
    explicit UnsupportedError(const std::string& what) : Error(ErrorKind::unsupported, what) {}
};

// Malformed binary file; offset is the byte position where parsing stopped.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : Error(ErrorKind::format, what + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

} // namespace ecgstress

#pragma once

#include <stdexcept>
#include <string>

namespace icc {

/// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input data (bad line, out-of-range value, duplicate id).
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t line = 0)
        : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

    /// 1-based line number, 0 when not tied to a line.
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// A record lacks a score that the operation needs.
class MissingScoreError : public Error {
public:
    MissingScoreError(const std::string& id, const std::string& score)
        : Error("record '" + id + "' has no score '" + score + "'"), id_(id) {}

    const std::string& id() const noexcept { return id_; }

private:
    std::string id_;
};

} // namespace icc

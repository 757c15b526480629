#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rbcda {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or out-of-range configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A field became non-finite or exceeded the magnitude threshold.
class BlowUpError : public Error {
public:
    BlowUpError(const std::string& what, std::size_t step)
        : Error(what + " at step " + std::to_string(step)), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// Bad magic, version, or shape in a trajectory file.
class FormatError : public Error {
public:
    using Error::Error;
};

/// The file is not this format, or a version this build does not read.
class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncationError : public FormatError {
public:
    TruncationError(std::size_t expected, std::size_t actual)
        : FormatError("truncated payload: expected " + std::to_string(expected) +
                      " bytes, found " + std::to_string(actual)),
          expected_(expected), actual_(actual) {}
    std::size_t expected() const noexcept { return expected_; }
    std::size_t actual() const noexcept { return actual_; }

private:
    std::size_t expected_;
    std::size_t actual_;
};

} // namespace rbcda

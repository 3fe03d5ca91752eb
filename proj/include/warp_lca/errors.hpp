#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace warp_lca {

/// Base class for every error raised by the library. `kind()` is a stable
/// machine-readable tag used by the CLI error JSON.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "error"; }
};

/// Mismatched tensor dimensions. `axis` names the offending axis.
class ShapeError : public Error {
public:
    ShapeError(std::string axis, std::size_t expected, std::size_t actual, const std::string& context)
        : Error(context + ": dimension mismatch on axis '" + axis + "' (expected " + std::to_string(expected) +
                ", got " + std::to_string(actual) + ")"),
          axis_(std::move(axis)), expected_(expected), actual_(actual) {}

    const char* kind() const noexcept override { return "shape"; }
    const std::string& axis() const noexcept { return axis_; }
    std::size_t expected() const noexcept { return expected_; }
    std::size_t actual() const noexcept { return actual_; }

private:
    std::string axis_;
    std::size_t expected_;
    std::size_t actual_;
};

class ConfigError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "config"; }
};

/// Wrong magic, unsupported version, or otherwise unrecognised file layout.
class FormatError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "format"; }
};

/// File is recognised but its content is truncated or inconsistent.
class CorruptionError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "corruption"; }
};

class IoError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "io"; }
};

/// Non-finite value produced by an iterative method.
class NumericError : public Error {
public:
    NumericError(const std::string& what, std::size_t iteration)
        : Error(what + " (iteration " + std::to_string(iteration) + ")"), iteration_(iteration) {}
    const char* kind() const noexcept override { return "numeric"; }
    std::size_t iteration() const noexcept { return iteration_; }

private:
    std::size_t iteration_;
};

/// LCA membrane potentials blew up.
class DivergenceError : public Error {
public:
    DivergenceError(std::size_t iteration, double max_abs)
        : Error("LCA diverged at iteration " + std::to_string(iteration) + " (max |u| = " + std::to_string(max_abs) +
                ")"),
          iteration_(iteration), max_abs_(max_abs) {}
    const char* kind() const noexcept override { return "divergence"; }
    std::size_t iteration() const noexcept { return iteration_; }
    double max_abs() const noexcept { return max_abs_; }

private:
    std::size_t iteration_;
    double max_abs_;
};

/// Stored state dataset was produced with a different dictionary.
class FingerprintError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "fingerprint"; }
};

} // namespace warp_lca

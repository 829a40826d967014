#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mkv {

/// Root of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A singular kernel was evaluated on its singular set.
class SingularityError : public Error {
 public:
  using Error::Error;
};

/// A parameter violates an operation's domain (exponents, angles, step sizes).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration (resolution, misconfigured study).
class ConfigurationError : public Error {
 public:
  using Error::Error;
};

/// A gridded function reaches the boundary of its grid.
class ExtentError : public Error {
 public:
  using Error::Error;
};

/// A grid, lattice or snapshot spacing is too coarse for the request.
class ResolutionError : public Error {
 public:
  using Error::Error;
};

/// Two stores that must be independent share a seed.
class IndependenceError : public Error {
 public:
  using Error::Error;
};

/// Stored artifact does not match its recorded hash or layout.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// Config text failed to parse; carries a 1-based position.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line, std::size_t column)
      : Error(what + " at line " + std::to_string(line) + ", column " + std::to_string(column)),
        line_(line),
        column_(column) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

/// A particle coordinate became non-finite during time stepping.
class BlowUpError : public Error {
 public:
  struct Diagnostics {
    std::size_t particle = 0;
    std::uint64_t step = 0;
    double time = 0.0;
    double max_drift = 0.0;
    /// Closest neighbours of the offending particle before the step: (index, distance).
    std::vector<std::pair<std::size_t, double>> suspects;
  };

  explicit BlowUpError(Diagnostics diag)
      : Error("particle " + std::to_string(diag.particle) + " became non-finite at step " +
              std::to_string(diag.step)),
        diag_(std::move(diag)) {}

  const Diagnostics& diagnostics() const noexcept { return diag_; }

 private:
  Diagnostics diag_;
};

}  // namespace mkv

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace helix {

// All throwing paths in the library use one of these so callers can tell
// "bad request" (ConfigError, ShapeError) from "bad math" (NumericError)
// from "would not fit" (FeasibilityError).

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// Raised when an operation would push tracked tensor memory past the
// configured logical budget. Carries the numbers so benchmarks can report
// them instead of just dying.
struct FeasibilityError : Error {
  std::uint64_t required_bytes;
  std::uint64_t budget_bytes;
  FeasibilityError(std::uint64_t required, std::uint64_t budget, const std::string& what_failed)
      : Error("feasibility: " + what_failed + " requires " + std::to_string(required) +
              " bytes against a budget of " + std::to_string(budget) + " bytes"),
        required_bytes(required),
        budget_bytes(budget) {}
};

}  // namespace helix

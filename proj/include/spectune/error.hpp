#pragma once

#include <stdexcept>
#include <string>

namespace spectune {

// One exception type per failure category; the CLI maps ConfigError to
// exit code 2 and everything else to 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SizeError : Error {
  using Error::Error;
};

struct RangeError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct ContractError : Error {
  using Error::Error;
};

}  // namespace spectune

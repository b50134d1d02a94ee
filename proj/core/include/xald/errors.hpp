#pragma once

#include <stdexcept>

namespace xald {

// Failure writing or reading artifacts once inputs validated fine.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values surfaced during training or sampling.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace xald

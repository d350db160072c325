#pragma once

#include <stdexcept>
#include <string>

namespace evifed {

// Dimension/shape mismatch between tensors. Messages name the offending shapes.
class shape_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed runtime input: non-finite values, empty batches, bad one-hots.
class value_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration (field values, impossible combinations).
class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Federation protocol violation (missing publication, aborted round).
class protocol_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace evifed

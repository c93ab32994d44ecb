#pragma once

#include <stdexcept>

namespace bil {

/// Non-finite values where finite ones are required (diverging training,
/// NaN gradients).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace bil

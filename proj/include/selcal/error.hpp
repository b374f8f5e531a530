#pragma once

#include <stdexcept>
#include <string>

namespace selcal {

// Input violates a documented contract (bad values, schema, shapes).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Filesystem or stream failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace selcal

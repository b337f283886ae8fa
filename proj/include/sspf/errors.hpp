#pragma once

#include <stdexcept>
#include <string>

namespace sspf {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or image dimensions do not satisfy an operation's precondition.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Infrared and visible images of a pair are not the same size.
class RegistrationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration value or unknown configuration key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A loss or gradient became NaN/Inf during optimization.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

}  // namespace sspf

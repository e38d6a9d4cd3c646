#pragma once

#include <stdexcept>
#include <string>

namespace olseg {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed arguments: dimension mismatch, non-finite values, bad boxes.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Hyper-parameter or configuration outside its admissible range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Factorization failure or other loss of numerical solvability.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Corrupt or inconsistent on-disk data. The message names the file.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure while writing.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace olseg

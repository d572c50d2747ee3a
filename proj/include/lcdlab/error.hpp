#pragma once

#include <stdexcept>
#include <string>

namespace lcdlab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or sizes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by an op, or a diverged loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Argument or configuration outside its documented domain.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or corrupted file (bad magic, version, CRC, checksum).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace lcdlab

#define LCDLAB_CHECK(cond, ExcType, msg)        \
  do {                                          \
    if (!(cond)) throw ExcType(std::string(msg)); \
  } while (0)

#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace groundling {

// Base for everything thrown on purpose.  The CLI maps these to exit codes;
// library code never catches them.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeMismatch : Error {
  using Error::Error;
};
struct NonFiniteValue : Error {
  using Error::Error;
};
struct NonScalarLoss : Error {
  using Error::Error;
};
struct IndexError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct UsageError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct UnknownToken : DataError {
  using DataError::DataError;
};
struct InvalidCount : DataError {
  using DataError::DataError;
};
struct InvalidLayerIndex : Error {
  using Error::Error;
};
struct DegenerateInput : DataError {
  using DataError::DataError;
};
struct ConstantSeries : DataError {
  using DataError::DataError;
};
struct SingletonCategory : DataError {
  using DataError::DataError;
};
struct TooFewPositives : DataError {
  using DataError::DataError;
};
struct AllZeroCounts : DataError {
  using DataError::DataError;
};
struct WindowLargerThanImage : DataError {
  using DataError::DataError;
};
struct BadMagic : FormatError {
  using FormatError::FormatError;
};
struct DimensionMismatch : FormatError {
  using FormatError::FormatError;
};
struct EmptyMask : DataError {
  using DataError::DataError;
};
struct BadTemperature : ConfigError {
  using ConfigError::ConfigError;
};
struct ZeroVector : DataError {
  using DataError::DataError;
};
struct UnknownPredicate : DataError {
  using DataError::DataError;
};
struct AlphaOutOfRange : UsageError {
  using UsageError::UsageError;
};
struct ZeroQuery : DataError {
  using DataError::DataError;
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

[[noreturn]] inline void throw_shape_mismatch(const std::vector<int>& a,
                                              const std::vector<int>& b,
                                              const std::string& where) {
  throw ShapeMismatch("shape mismatch in " + where + ": " + shape_str(a) +
                      " vs " + shape_str(b));
}

}  // namespace groundling

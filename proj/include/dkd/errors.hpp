#pragma once

#include <stdexcept>
#include <string>

namespace dkd {

// Base of every error raised by the library. `is_validation()` separates bad
// user input (CLI exit 1) from failures while doing the work (CLI exit 2).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual bool is_validation() const { return false; }
};

class ValidationError : public Error {
 public:
  using Error::Error;
  bool is_validation() const override { return true; }
};

class ShapeError : public ValidationError { public: using ValidationError::ValidationError; };
class LengthError : public ValidationError { public: using ValidationError::ValidationError; };
class RankError : public ValidationError { public: using ValidationError::ValidationError; };
class ParameterError : public ValidationError { public: using ValidationError::ValidationError; };
class ConfigError : public ValidationError { public: using ValidationError::ValidationError; };
class SpecError : public ValidationError { public: using ValidationError::ValidationError; };
class IncompatibleError : public ValidationError { public: using ValidationError::ValidationError; };
class ProtocolError : public ValidationError { public: using ValidationError::ValidationError; };

class FormatError : public Error { public: using Error::Error; };
class IntegrityError : public Error { public: using Error::Error; };
class VersionError : public Error { public: using Error::Error; };
class DataError : public Error { public: using Error::Error; };
class NumericError : public Error { public: using Error::Error; };

}  // namespace dkd

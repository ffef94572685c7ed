#ifndef VQA_ERROR_HPP
#define VQA_ERROR_HPP

#include <stdexcept>
#include <string>

namespace vqa {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor/matrix shapes. Message names both shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration (unknown kinds, bad combinations).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Numeric domain violations (non-finite inputs where finite is required).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Out-of-range indices (token ids, class targets).
class IndexError : public Error {
 public:
  using Error::Error;
};

// API contract violations (non-scalar loss, reused tape, negative epoch).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed records in otherwise readable input (carries line/record info).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Structurally invalid files (bad magic, truncation, wrong JSON shape).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Semantically invalid data (wrong answer count, duplicate ids).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Missing keys in an index (unknown question/image id, unknown name).
class LookupError : public Error {
 public:
  using Error::Error;
};

// Two record sets that should line up by id do not.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

}  // namespace vqa

#endif  // VQA_ERROR_HPP

#pragma once

#include <stdexcept>
#include <string>

namespace dtmil {

// Shape or dimension mismatch between tensors. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid argument value (domain violations, bad labels, bad config fields).
class ValueError : public std::invalid_argument {
 public:
  explicit ValueError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Numeric failure during a long-running computation (NaN loss etc.).
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& msg, int epoch) : std::runtime_error(msg), epoch(epoch) {}
  int epoch;
};

// AUC is undefined when the label vector contains a single class.
class SingleClassError : public std::invalid_argument {
 public:
  explicit SingleClassError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Parse failure for a .bagf feature file; `kind` distinguishes the causes.
class BagfError : public std::runtime_error {
 public:
  enum class Kind { magic, version, dtype, zero_dim, truncated };
  BagfError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind(kind) {}
  Kind kind;
};

// Manifest validation failure; `row` is the 1-based data row when known.
class ManifestError : public std::runtime_error {
 public:
  ManifestError(const std::string& msg, int row = -1) : std::runtime_error(msg), row(row) {}
  int row;
};

}  // namespace dtmil

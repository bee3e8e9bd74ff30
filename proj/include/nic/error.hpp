// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace nic {

/// Base of every error the toolkit throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes disagree or an index is out of range.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Bad user input: invalid flag values, empty datasets, bad arguments.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A file on disk does not follow its declared format.
class FormatError : public Error {
 public:
  enum class Kind { kBadMagic, kBadVersion, kTruncated, kDimMismatch, kInvalidValue, kSyntax };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Two artifacts that must agree (checkpoint vs features, vocab vs config) do not.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace nic

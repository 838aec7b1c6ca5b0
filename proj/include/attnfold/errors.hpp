// Copyright (c) 2026 attnfold contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace attnfold {

/// Base class of every error thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed input documents: JSON syntax errors, unreadable files,
/// unparseable flag values.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Structurally parseable input that violates a semantic contract:
/// graph shape rules, unknown tensors, plan/shape mismatches,
/// out-of-range parameters.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Numeric verification against the reference oracle failed.
class VerifyError : public Error {
 public:
  using Error::Error;
};

}  // namespace attnfold

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace maskinv {

// Weight container or config cannot be read: missing keys, shape or dtype
// mismatches, malformed files.
class LoadError : public std::runtime_error {
 public:
  explicit LoadError(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller passed an invalid value: empty mask, non-binary data, bad dims.
class ArgumentError : public std::invalid_argument {
 public:
  explicit ArgumentError(const std::string& msg) : std::invalid_argument(msg) {}
};

// API misuse that no input data can trigger on its own, e.g. replaying
// cached activations against a different model.
class UsageError : public std::logic_error {
 public:
  explicit UsageError(const std::string& msg) : std::logic_error(msg) {}
};

// Inconsistent dataset inputs: labels missing from the bank, unknown ids,
// malformed manifests.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace maskinv

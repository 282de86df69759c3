#pragma once

#include <stdexcept>
#include <string>

namespace ueraser {

// Invalid configuration (bad shapes, bad hyperparameters, bad CLI config).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid runtime input (label out of range, non-bijective permutation, ...).
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// API called in the wrong order (backward without a recorded forward).
class StateError : public std::runtime_error {
 public:
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed on-disk data (wrong magic, wrong file size).
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training produced a non-finite update.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ueraser

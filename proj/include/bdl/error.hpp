#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bdl {

// Base class for every error raised by the library. The category decides the
// process exit code at the CLI boundary.
class Error : public std::runtime_error {
 public:
  enum class Category { config, shape, range, domain, numeric, io };

  Error(Category category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  Category category() const noexcept { return category_; }

 private:
  Category category_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(Category::config, what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(Category::shape, what) {}
};

class RangeError : public Error {
 public:
  explicit RangeError(const std::string& what) : Error(Category::range, what) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error(Category::domain, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(Category::numeric, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(Category::io, what) {}
};

// Raised when an iterative process produces non-finite or exploding state.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : NumericError(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Wraps a failure from one pipeline stage; keeps the original category.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& inner)
      : Error(inner.category(), "[" + stage + "] " + inner.what()), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace bdl

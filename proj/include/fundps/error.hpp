#pragma once

#include <stdexcept>
#include <string>

namespace fundps {

/// Base class of every error raised by the library. `category()` is a short
/// machine-parseable tag that the CLI prints on failure.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape-mismatch", what) {}
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error("invalid-argument", what) {}
};

}  // namespace fundps

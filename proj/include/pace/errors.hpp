#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace pace {

// Root of every error the library throws. Subclasses map one-to-one onto the
// CLI exit-code classes (usage / data / numerical).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Dimension or shape disagreement between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Violated precondition on a caller-supplied value (config, dataset contract).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Input is well-formed but carries no usable signal (all-zero attention,
// single-class labels).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class SingularityError : public Error {
 public:
  explicit SingularityError(const std::string& what,
                            std::optional<std::size_t> concept_index = std::nullopt)
      : Error(concept_index ? what + " (concept " + std::to_string(*concept_index) + ")" : what),
        concept_index_(concept_index) {}

  std::optional<std::size_t> concept_index() const { return concept_index_; }

 private:
  std::optional<std::size_t> concept_index_;
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what,
                          std::optional<std::size_t> iteration = std::nullopt)
      : Error(iteration ? what + " at iteration " + std::to_string(*iteration) : what),
        iteration_(iteration) {}

  std::optional<std::size_t> iteration() const { return iteration_; }

 private:
  std::optional<std::size_t> iteration_;
};

// Malformed or inconsistent on-disk data. Always names the offending file.
class FormatError : public Error {
 public:
  FormatError(const std::string& file, const std::string& what)
      : Error(file + ": " + what), file_(file) {}

  const std::string& file() const { return file_; }

 private:
  std::string file_;
};

}  // namespace pace

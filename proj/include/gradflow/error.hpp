#pragma once

#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Core>

namespace gradflow {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Invalid dimension, resolution, tolerance or missing problem data.
class ConfigError : public Error {
  public:
    using Error::Error;
};

/// Operands live on different bases or have the wrong length.
class ShapeError : public Error {
  public:
    using Error::Error;
};

/// The requested operation is not defined for this basis/kind/size.
class UnsupportedError : public Error {
  public:
    using Error::Error;
};

/// A non-finite value appeared. Carries the last finite state seen.
class DivergenceError : public Error {
  public:
    DivergenceError(std::string const& what, Eigen::VectorXd last_finite)
        : Error(what), last_finite_(std::move(last_finite)) {}

    [[nodiscard]] Eigen::VectorXd const& last_finite_state() const noexcept { return last_finite_; }

  private:
    Eigen::VectorXd last_finite_;
};

/// An architecture expansion failed to open a new direction.
class ExpansionRejected : public Error {
  public:
    ExpansionRejected(std::string const& what, std::size_t parameter_index)
        : Error(what), parameter_index_(parameter_index) {}

    [[nodiscard]] std::size_t parameter_index() const noexcept { return parameter_index_; }

  private:
    std::size_t parameter_index_;
};

} // namespace gradflow

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace metactl {

/// Caller broke a documented precondition (shape, range, ordering).
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A loss or iterate went NaN/Inf.
class NonFiniteError : public std::runtime_error {
public:
    NonFiniteError(const std::string& what, double offending, std::ptrdiff_t step = -1)
        : std::runtime_error(what), offending_(offending), step_(step) {}

    double offending_value() const { return offending_; }
    /// Iteration index at which it happened, or -1.
    std::ptrdiff_t step() const { return step_; }

private:
    double offending_;
    std::ptrdiff_t step_;
};

class SimulationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SolverError : public std::runtime_error {
public:
    SolverError(const std::string& what, int iterations, double residual)
        : std::runtime_error(what), iterations_(iterations), residual_(residual) {}

    int iterations() const { return iterations_; }
    double residual() const { return residual_; }

private:
    int iterations_;
    double residual_;
};

/// Negative curvature met where a positive-definite operator was required
/// (regularization strength not above the loss Hessian bound).
class IndefiniteError : public std::runtime_error {
public:
    IndefiniteError(const std::string& what, double curvature)
        : std::runtime_error(what), curvature_(curvature) {}

    double curvature() const { return curvature_; }

private:
    double curvature_;
};

class DatasetError : public std::runtime_error {
public:
    enum class Kind { Io, Malformed, VersionMismatch, DtMismatch, UnknownTask };

    DatasetError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace metactl

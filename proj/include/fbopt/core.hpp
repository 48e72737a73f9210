#pragma once

#include <Eigen/Dense>

#include <functional>
#include <limits>
#include <stdexcept>
#include <string>

namespace fbopt {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Base class for all errors thrown by the library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Evaluation requested outside the domain of a function (e.g. a log barrier
/// at an infeasible point). Integrators treat this as a rejectable step.
struct DomainError : Error {
  explicit DomainError(const std::string& msg) : Error(msg) {}
};

struct DimensionMismatch : Error {
  explicit DimensionMismatch(const std::string& msg) : Error(msg) {}
};

struct Infeasible : Error {
  explicit Infeasible(const std::string& msg) : Error(msg) {}
};

struct MaxIterations : Error {
  explicit MaxIterations(const std::string& msg) : Error(msg) {}
};

struct NotInSet : Error {
  explicit NotInSet(const std::string& msg) : Error(msg) {}
};

struct SingularHessian : Error {
  explicit SingularHessian(const std::string& msg) : Error(msg) {}
};

struct OutOfDomain : DomainError {
  explicit OutOfDomain(const std::string& msg) : DomainError(msg) {}
};

struct NegativeDual : Error {
  explicit NegativeDual(const std::string& msg) : Error(msg) {}
};

struct NotStable : Error {
  explicit NotStable(const std::string& msg) : Error(msg) {}
};

struct NotHurwitz : Error {
  explicit NotHurwitz(const std::string& msg) : Error(msg) {}
};

struct SingularMatrix : Error {
  explicit SingularMatrix(const std::string& msg) : Error(msg) {}
};

struct NoSettle : Error {
  explicit NoSettle(const std::string& msg) : Error(msg) {}
};

struct NoConvergence : Error {
  explicit NoConvergence(const std::string& msg) : Error(msg) {}
};

struct SensitivityUnavailable : Error {
  explicit SensitivityUnavailable(const std::string& msg) : Error(msg) {}
};

struct NonScalarInput : Error {
  explicit NonScalarInput(const std::string& msg) : Error(msg) {}
};

struct InnerSolveFailed : Error {
  explicit InnerSolveFailed(const std::string& msg) : Error(msg) {}
};

struct QpInfeasible : Infeasible {
  explicit QpInfeasible(const std::string& msg) : Infeasible(msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

inline void require_dims(bool cond, const std::string& msg) {
  if (!cond) throw DimensionMismatch(msg);
}

}  // namespace fbopt

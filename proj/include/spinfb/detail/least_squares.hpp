#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/NonLinearOptimization>
#include <unsupported/Eigen/NumericalDiff>

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>

namespace spinfb::detail {

// Residual vector r(params); the solver minimizes |r|^2.
using ResidualFn = std::function<void(const Eigen::VectorXd& params, Eigen::VectorXd& residuals)>;

struct LeastSquaresResult {
  Eigen::VectorXd params;
  Eigen::MatrixXd covariance;  // s^2 (J^T J)^{-1}, s^2 = |r|^2 / (m - n)
  double rms_residual = 0.0;
  double cost = 0.0;  // |r|^2
  int status = 0;
  bool converged = false;
};

class ResidualFunctor {
 public:
  using Scalar = double;
  enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;

  ResidualFunctor(ResidualFn fn, int n_params, int n_values)
      : fn_(std::move(fn)), inputs_(n_params), values_(n_values) {}

  int operator()(const Eigen::VectorXd& x, Eigen::VectorXd& fvec) const {
    fn_(x, fvec);
    for (Eigen::Index i = 0; i < fvec.size(); ++i)
      if (!std::isfinite(fvec[i])) fvec[i] = 1e150;
    return 0;
  }
  int inputs() const { return inputs_; }
  int values() const { return values_; }

 private:
  ResidualFn fn_;
  int inputs_;
  int values_;
};

inline Eigen::MatrixXd numeric_jacobian(const ResidualFn& fn, const Eigen::VectorXd& x, Eigen::Index m) {
  Eigen::MatrixXd jac(m, x.size());
  Eigen::VectorXd r_plus(m), r_minus(m);
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double h = 1e-6 * std::max(1.0, std::abs(x[j]));
    Eigen::VectorXd xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    fn(xp, r_plus);
    fn(xm, r_minus);
    jac.col(j) = (r_plus - r_minus) / (2.0 * h);
  }
  return jac;
}

// Levenberg-Marquardt (MINPACK port in Eigen) with a forward-difference
// Jacobian; covariance from a central-difference Jacobian at the optimum.
inline LeastSquaresResult levenberg_marquardt(const ResidualFn& fn, Eigen::VectorXd x0, Eigen::Index n_values,
                                             int max_evaluations = 4000) {
  const auto n = static_cast<int>(x0.size());
  const auto m = static_cast<int>(n_values);
  ResidualFunctor functor(fn, n, m);
  Eigen::NumericalDiff<ResidualFunctor> numdiff(functor);
  Eigen::LevenbergMarquardt<Eigen::NumericalDiff<ResidualFunctor>> lm(numdiff);
  lm.parameters.maxfev = max_evaluations;
  lm.parameters.xtol = 1e-12;
  lm.parameters.ftol = 1e-12;
  const auto status = lm.minimize(x0);

  LeastSquaresResult out;
  out.params = x0;
  out.status = static_cast<int>(status);
  out.converged = status >= 1 && status != Eigen::LevenbergMarquardtSpace::TooManyFunctionEvaluation &&
                  status != Eigen::LevenbergMarquardtSpace::UserAsked;

  Eigen::VectorXd r(m);
  fn(x0, r);
  out.cost = r.squaredNorm();
  out.rms_residual = std::sqrt(out.cost / m);
  if (!std::isfinite(out.cost)) out.converged = false;

  const Eigen::MatrixXd jac = numeric_jacobian(fn, x0, m);
  // column-equilibrate so parameters on very different scales (Hz next to
  // dimensionless amplitudes) do not trip the rank test
  Eigen::VectorXd scale = jac.colwise().norm().transpose();
  for (Eigen::Index j = 0; j < scale.size(); ++j)
    if (!(scale[j] > 0.0)) scale[j] = 1.0;
  const Eigen::MatrixXd js = jac * scale.cwiseInverse().asDiagonal();
  const double dof = std::max(1, m - n);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(js.transpose() * js);
  if (lu.isInvertible()) {
    const Eigen::MatrixXd inv = scale.cwiseInverse().asDiagonal() * lu.inverse() * scale.cwiseInverse().asDiagonal();
    out.covariance = inv * (out.cost / dof);
  } else {
    out.covariance = Eigen::MatrixXd::Constant(n, n, std::numeric_limits<double>::infinity());
  }
  return out;
}

}  // namespace spinfb::detail

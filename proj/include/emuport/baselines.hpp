#pragma once

#include <cmath>

#include "emuport/linalg.hpp"

namespace emuport {

struct MyopicSolution {
  Vector w;
  double expected_return = 0.0;
  double variance = 0.0;
};

struct MinVarianceBound {
  Vector w;
  double sd = 0.0;
};

namespace detail {
inline double quad_cov(const Matrix& precision, const Vector& w) {
  const Eigen::LLT<Matrix> llt(precision);
  require(llt.info() == Eigen::Success, ErrorCode::invalid_spec,
          "return precision is not positive definite");
  return llt.matrixL().solve(w).squaredNorm();
}
}  // namespace detail

/// Minimum-variance portfolio w = K 1 / (1'K 1) and sd bound (1'K 1)^{-1/2};
/// K is the precision of returns so K^{-1} is their covariance.
inline MinVarianceBound min_variance_bound(const Matrix& precision) {
  require_square(precision, "return precision");
  require_pd(precision, "return precision");
  const Vector k1 = precision * Vector::Ones(precision.rows());
  const double s = k1.sum();
  return {k1 / s, 1.0 / std::sqrt(s)};
}

/// One-step Markowitz: minimize w'K^{-1}w subject to f'w = m and 1'w = 1,
/// solved in closed form through the 2x2 Lagrange system.
inline MyopicSolution markowitz_myopic(const Vector& f, const Matrix& precision, double m) {
  require_square(precision, "return precision");
  require(f.size() == precision.rows(), ErrorCode::shape_error, "f dimension");
  require_pd(precision, "return precision");
  const auto k = f.size();
  Matrix basis(k, 2);
  basis.col(0) = f;
  basis.col(1) = Vector::Ones(k);
  const Matrix kb = precision * basis;
  const Eigen::Matrix2d lagrange = basis.transpose() * kb;

  // f parallel to 1: the 2x2 system is singular.
  const double spread = (f.array() - f.mean()).abs().maxCoeff();
  const double f_scale = std::max(f.cwiseAbs().maxCoeff(), 1e-300);
  if (spread <= 1e-12 * f_scale) {
    require(std::abs(m - f(0)) <= 1e-12 * std::max(1.0, std::abs(m)),
            ErrorCode::infeasible_target,
            "expected return target unreachable when all assets share the same mean");
    const auto mv = min_variance_bound(precision);
    return {mv.w, f.dot(mv.w), mv.sd * mv.sd};
  }
  const Eigen::Vector2d rhs(m, 1.0);
  const Eigen::Vector2d mult = lagrange.fullPivLu().solve(rhs);
  MyopicSolution out;
  out.w = kb * mult;
  out.expected_return = f.dot(out.w);
  out.variance = detail::quad_cov(precision, out.w);
  return out;
}

}  // namespace emuport

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "emuport/error.hpp"

namespace emuport {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Relative eigenvalue cutoff used for generalized inverses, rank-subspace
/// sampling and pseudo-determinants.
inline constexpr double kEigenCutoff = 1e-12;

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

inline double max_abs(const Matrix& m) {
  return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

inline void require_square(const Matrix& m, const std::string& what) {
  require(m.rows() == m.cols(), ErrorCode::shape_error,
          what + " must be square, got " + std::to_string(m.rows()) + "x" +
              std::to_string(m.cols()));
}

// Asymmetry is judged relative to the largest entry so that tiny and huge
// covariances are treated alike.
inline void require_symmetric(const Matrix& m, const std::string& what,
                              double tol = 1e-10) {
  require_square(m, what);
  const double scale = std::max(1.0, max_abs(m));
  require(max_abs(m - m.transpose()) <= tol * scale,
          ErrorCode::invalid_covariance, what + " is not symmetric");
}

/// Eigendecomposition of a symmetric matrix with eigenvalues below
/// rel_tol * max|eigenvalue| reported as zero.
struct SymmetricEigen {
  Vector values;   // ascending, small ones clamped to exactly 0
  Matrix vectors;  // orthonormal columns
  Eigen::Index rank = 0;

  explicit SymmetricEigen(const Matrix& m, double rel_tol = kEigenCutoff) {
    Eigen::SelfAdjointEigenSolver<Matrix> solver(symmetrize(m));
    values = solver.eigenvalues();
    vectors = solver.eigenvectors();
    const double top = values.size() ? values.cwiseAbs().maxCoeff() : 0.0;
    const double cut = rel_tol * top;
    for (Eigen::Index i = 0; i < values.size(); ++i) {
      if (std::abs(values(i)) <= cut || top == 0.0) {
        values(i) = 0.0;
      } else {
        ++rank;
      }
    }
  }

  double min_value() const { return values.size() ? values.minCoeff() : 0.0; }
  double max_value() const { return values.size() ? values.maxCoeff() : 0.0; }

  /// Orthonormal basis of the range (columns with nonzero eigenvalue).
  Matrix range_basis() const {
    Matrix basis(vectors.rows(), rank);
    Eigen::Index c = 0;
    for (Eigen::Index i = 0; i < values.size(); ++i)
      if (values(i) != 0.0) basis.col(c++) = vectors.col(i);
    return basis;
  }
};

/// Least-norm generalized inverse of a symmetric matrix.
inline Matrix sym_pseudo_inverse(const Matrix& m, double rel_tol = kEigenCutoff) {
  require_symmetric(m, "pseudo-inverse input");
  if (m.size() == 0) return m;
  const SymmetricEigen eig(m, rel_tol);
  Vector inv = Vector::Zero(eig.values.size());
  for (Eigen::Index i = 0; i < inv.size(); ++i)
    if (eig.values(i) != 0.0) inv(i) = 1.0 / eig.values(i);
  return symmetrize(eig.vectors * inv.asDiagonal() * eig.vectors.transpose());
}

/// Checks symmetry and positive semi-definiteness (eigenvalues not below
/// -tol * max eigenvalue).
inline void require_psd(const Matrix& m, const std::string& what,
                        double rel_tol = 1e-9) {
  require_symmetric(m, what);
  if (m.size() == 0) return;
  Eigen::SelfAdjointEigenSolver<Matrix> solver(symmetrize(m),
                                               Eigen::EigenvaluesOnly);
  const auto& ev = solver.eigenvalues();
  const double top = std::max(ev.cwiseAbs().maxCoeff(), 0.0);
  require(ev.minCoeff() >= -rel_tol * std::max(top, 1e-300),
          ErrorCode::invalid_covariance, what + " is not positive semi-definite");
}

inline bool is_positive_definite(const Matrix& m) {
  if (m.rows() != m.cols() || m.size() == 0) return false;
  Eigen::LLT<Matrix> llt(symmetrize(m));
  return llt.info() == Eigen::Success;
}

inline void require_pd(const Matrix& m, const std::string& what) {
  require_symmetric(m, what);
  require(is_positive_definite(m), ErrorCode::invalid_covariance,
          what + " is not positive definite");
}

/// Log pseudo-determinant (sum of log nonzero eigenvalues).
inline double log_pseudo_determinant(const SymmetricEigen& eig) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < eig.values.size(); ++i)
    if (eig.values(i) > 0.0) s += std::log(eig.values(i));
  return s;
}

/// Orthonormal basis of the null space of a full-row-rank matrix.
inline Matrix null_space_basis(const Matrix& a) {
  const Eigen::Index k = a.cols();
  if (a.rows() == 0) return Matrix::Identity(k, k);
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeFullV);
  const auto rank = svd.rank();
  return svd.matrixV().rightCols(k - rank);
}

/// Linear equality constraints A w = a on a state or portfolio.
struct LinearConstraint {
  Matrix A;
  Vector a;

  static LinearConstraint sum_to_one(Eigen::Index k) {
    return {Matrix::Ones(1, k), Vector::Ones(1)};
  }

  bool is_sum_to_one() const {
    return A.rows() == 1 && (A.array() == 1.0).all() && a.size() == 1 && a(0) == 1.0;
  }

  void validate(Eigen::Index k) const {
    require(A.cols() == k && A.rows() == a.size(), ErrorCode::shape_error,
            "constraint dimensions do not match the state");
    require(A.rows() <= k, ErrorCode::invalid_spec, "more constraints than assets");
    Eigen::FullPivLU<Matrix> lu(A);
    require(lu.rank() == A.rows(), ErrorCode::invalid_spec, "constraint matrix is not full rank");
  }

  double residual(const Vector& w) const {
    return A.rows() ? (A * w - a).cwiseAbs().maxCoeff() : 0.0;
  }
};

}  // namespace emuport

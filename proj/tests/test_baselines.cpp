#include <gtest/gtest.h>

#include <random>

#include "emuport/baselines.hpp"
#include "oracles.hpp"

using namespace emuport;
using namespace emuport::testing;

TEST(Markowitz, TwoAssetExample) {
  const Vector f = (Vector(2) << 0.0, 0.001).finished();
  const auto sol = markowitz_myopic(f, Matrix::Identity(2, 2), 0.0005);
  EXPECT_NEAR(sol.w(0), 0.5, 1e-12);
  EXPECT_NEAR(sol.w(1), 0.5, 1e-12);
  EXPECT_NEAR(sol.variance, 0.5, 1e-12);
}

TEST(Markowitz, KktResidualAgainstDenseSystem) {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    const Eigen::Index k = 2 + rep % 6;
    const Vector f = random_vector(rng, k, 0.01);
    const Matrix prec = random_spd(rng, k, 100.0);
    const double m = uniform(rng, -0.01, 0.01);
    const auto sol = markowitz_myopic(f, prec, m);
    // [2 S  B; B' 0][w; nu] = [0; m; 1] with S = K^{-1}, B = [f 1]
    Matrix kkt = Matrix::Zero(k + 2, k + 2);
    kkt.topLeftCorner(k, k) = 2.0 * prec.inverse();
    kkt.block(0, k, k, 1) = f;
    kkt.block(0, k + 1, k, 1) = Vector::Ones(k);
    kkt.block(k, 0, 1, k) = f.transpose();
    kkt.block(k + 1, 0, 1, k) = Vector::Ones(k).transpose();
    Vector rhs = Vector::Zero(k + 2);
    rhs(k) = m;
    rhs(k + 1) = 1.0;
    const Vector ref = kkt.fullPivLu().solve(rhs).head(k);
    EXPECT_LE(max_abs(sol.w - ref), 1e-10 * std::max(1.0, ref.cwiseAbs().maxCoeff()));
    EXPECT_NEAR(sol.w.sum(), 1.0, 1e-10);
    EXPECT_NEAR(f.dot(sol.w), m, 1e-10);
  }
}

TEST(Markowitz, ParallelMeans) {
  const Vector f = Vector::Constant(3, 0.002);
  const Matrix prec = Matrix::Identity(3, 3);
  try {
    markowitz_myopic(f, prec, 0.0005);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::infeasible_target);
  }
  const auto sol = markowitz_myopic(f, prec, 0.002);
  EXPECT_LE(max_abs(sol.w - Vector::Constant(3, 1.0 / 3.0)), 1e-14);
}

TEST(Markowitz, RejectsBadPrecision) {
  Matrix prec = Matrix::Identity(2, 2);
  prec(1, 1) = -1.0;
  try {
    markowitz_myopic(Vector::Ones(2), prec, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_covariance);
  }
}

TEST(MinVariance, IdentityAndBoundProperty) {
  auto mv = min_variance_bound(Matrix::Identity(4, 4));
  EXPECT_LE(max_abs(mv.w - Vector::Constant(4, 0.25)), 1e-15);
  EXPECT_NEAR(mv.sd, 0.5, 1e-15);

  std::mt19937_64 rng(12);
  for (int rep = 0; rep < 20; ++rep) {
    const Matrix prec = random_spd(rng, 5, 1e3);
    mv = min_variance_bound(prec);
    const Matrix cov = prec.inverse();
    EXPECT_NEAR(std::sqrt(mv.w.dot(cov * mv.w)), mv.sd, 1e-12);
    for (int i = 0; i < 100; ++i) {
      Vector w = random_vector(rng, 5);
      w.array() += (1.0 - w.sum()) / 5.0;
      EXPECT_GE(std::sqrt(w.dot(cov * w)) + 1e-14, mv.sd);
    }
    // the myopic portfolio at the min-variance return attains the bound
    const Vector f = random_vector(rng, 5, 0.01);
    const auto sol = markowitz_myopic(f, prec, f.dot(mv.w));
    EXPECT_NEAR(std::sqrt(sol.variance), mv.sd, 1e-10);
    EXPECT_GE(std::sqrt(markowitz_myopic(f, prec, 0.05).variance) + 1e-14, mv.sd);
  }
}

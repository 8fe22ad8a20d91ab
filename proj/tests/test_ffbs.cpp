#include <gtest/gtest.h>

#include <random>

#include "emuport/ffbs.hpp"
#include "emuport/loss.hpp"
#include "oracles.hpp"

using namespace emuport;
using namespace emuport::testing;

namespace {

SyntheticDLM sum_to_one_dlm(std::mt19937_64& rng, Eigen::Index k, int h) {
  SyntheticDLM m = random_dlm(rng, k, h);
  m.initial_state.array() += (1.0 - m.initial_state.sum()) / static_cast<double>(k);
  const Matrix a = Matrix::Ones(1, k);
  for (auto& w : m.evolution) w = project_evolution_covariance(*w, a);
  return m;
}

}  // namespace

TEST(SymPseudoInverse, IdentityAndProjector) {
  EXPECT_TRUE(sym_pseudo_inverse(Matrix::Identity(3, 3)).isApprox(Matrix::Identity(3, 3)));
  const Matrix w = Matrix::Identity(2, 2) - Matrix::Ones(2, 2) / 2.0;
  EXPECT_LE(max_abs(sym_pseudo_inverse(w) - w), 1e-14);
}

TEST(SymPseudoInverse, MoorePenroseIdentitiesOnRankDeficient) {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::Index k = 2 + rep % 5;
    const Matrix m = random_psd_rank(rng, k, 1 + rep % (k - 1));
    const Matrix p = sym_pseudo_inverse(m);
    EXPECT_LE(max_abs(m * p * m - m), 1e-9);
    EXPECT_LE(max_abs(p * m * p - p), 1e-9);
    EXPECT_LE(max_abs((m * p).transpose() - m * p), 1e-9);
    EXPECT_LE(max_abs((p * m).transpose() - p * m), 1e-9);
  }
}

TEST(SymPseudoInverse, RejectsAsymmetric) {
  Matrix m(2, 2);
  m << 1, 0.5, 0.0, 1;
  try {
    sym_pseudo_inverse(m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_covariance);
  }
}

TEST(ForwardFilter, ZeroEvolutionPinsState) {
  SyntheticDLM m;
  m.initial_state = Vector::Ones(1);
  m.observations = {{ObservationBlock::scalar(Vector::Ones(1), 5.0, 0.3),
                     ObservationBlock::identity(Vector::Zero(1), Matrix::Identity(1, 1))}};
  m.evolution = {Matrix::Zero(1, 1)};
  const auto f = forward_filter(m);
  EXPECT_DOUBLE_EQ(f.steps[0].mean(0), 1.0);
  EXPECT_DOUBLE_EQ(f.steps[0].cov(0, 0), 0.0);
}

TEST(ForwardFilter, MatchesDenseJointGaussian) {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 10; ++rep) {
    const SyntheticDLM m = random_dlm(rng, 2, 2);
    const auto f = forward_filter(m);
    // Filtering at t uses observations up to t: compare the last step with the
    // full dense posterior and the first step with the t=1-truncated model.
    const auto dense = dense_posterior(m);
    EXPECT_LE(max_abs(f.steps[1].mean - dense.block(1, 2)), 1e-10);
    EXPECT_LE(max_abs(f.steps[1].cov - dense.cov_block(1, 2)), 1e-10);
    SyntheticDLM first = m;
    first.observations.resize(1);
    first.evolution.resize(1);
    const auto d1 = dense_posterior(first);
    EXPECT_LE(max_abs(f.steps[0].mean - d1.block(0, 2)), 1e-10);
    EXPECT_LE(max_abs(f.steps[0].cov - d1.cov_block(0, 2)), 1e-10);
    // C_t <= R_t in the PSD order
    for (const auto& s : f.steps) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(s.prior_cov - s.cov);
      EXPECT_GE(es.eigenvalues().minCoeff(), -1e-12);
    }
  }
}

TEST(ForwardFilter, HardTargetIsExact) {
  std::mt19937_64 rng(3);
  SyntheticDLM m = random_dlm(rng, 3, 2);
  m.observations[0][0].covariance(0, 0) = 0.0;
  const Vector f1 = m.observations[0][0].design.row(0).transpose();
  const double target = m.observations[0][0].value(0);
  const auto fm = forward_filter(m);
  EXPECT_NEAR(f1.dot(fm.steps[0].mean), target, 1e-10);
  EXPECT_NEAR(f1.dot(fm.steps[0].cov * f1), 0.0, 1e-10);
  // also after smoothing
  const auto s = backward_smooth(fm, m);
  EXPECT_NEAR(f1.dot(s.mean[0]), target, 1e-10);
}

TEST(ForwardFilter, BlockOrderInvariance) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    SyntheticDLM m = random_dlm(rng, 3, 3);
    for (auto& blocks : m.observations)
      blocks.push_back(ObservationBlock::identity(random_vector(rng, 3), random_spd(rng, 3)));
    SyntheticDLM rev = m;
    for (auto& blocks : rev.observations) std::reverse(blocks.begin(), blocks.end());
    const auto a = forward_filter(m);
    const auto b = forward_filter(rev);
    for (int t = 0; t < 3; ++t) {
      EXPECT_LE(max_abs(a.steps[t].mean - b.steps[t].mean), 1e-10);
      EXPECT_LE(max_abs(a.steps[t].cov - b.steps[t].cov), 1e-10);
    }
  }
}

TEST(ForwardFilter, RejectsBadInputs) {
  std::mt19937_64 rng(1);
  SyntheticDLM m = random_dlm(rng, 2, 2);
  SyntheticDLM bad = m;
  bad.evolution[1] = -Matrix::Identity(2, 2);
  try {
    forward_filter(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_covariance);
  }
  bad = m;
  bad.observations[0][1].covariance = Matrix::Identity(3, 3);
  try {
    forward_filter(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::shape_error);
  }
}

TEST(BackwardSmooth, SingleStepIsFiltering) {
  std::mt19937_64 rng(2);
  const SyntheticDLM m = random_dlm(rng, 3, 1);
  const auto f = forward_filter(m);
  const auto s = backward_smooth(f, m);
  EXPECT_EQ(s.mean[0], f.steps[0].mean);
  EXPECT_EQ(s.cov[0], f.steps[0].cov);
}

TEST(BackwardSmooth, SumToOnePreserved) {
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    const SyntheticDLM m = sum_to_one_dlm(rng, 2 + rep % 4, 3);
    const auto s = backward_smooth(forward_filter(m), m);
    const Vector ones = Vector::Ones(m.state_dim());
    for (int t = 0; t < 3; ++t) {
      EXPECT_NEAR(s.mean[t].sum(), 1.0, 1e-10);
      EXPECT_NEAR(ones.dot(s.cov[t] * ones), 0.0, 1e-9);
    }
  }
}

TEST(BackwardSmooth, OracleEquivalenceRandom) {
  std::mt19937_64 rng(13);
  for (int rep = 0; rep < 60; ++rep) {
    const Eigen::Index k = 1 + rep % 5;
    const int h = 1 + (rep / 5) % 5;
    const SyntheticDLM m = random_dlm(rng, k, h);
    const auto s = backward_smooth(forward_filter(m), m);
    const auto dense = dense_posterior(m);
    for (int t = 0; t < h; ++t) {
      EXPECT_LE(max_abs(s.mean[t] - dense.block(t, k)), 1e-8);
      EXPECT_LE(max_abs(s.cov[t] - dense.cov_block(t, k)), 1e-8);
    }
  }
}

TEST(BackwardSmooth, GeneralConstraintPreserved) {
  std::mt19937_64 rng(21);
  const Eigen::Index k = 5;
  Matrix a(2, k);
  a.row(0).setOnes();
  a.row(1) = random_vector(rng, k).transpose();
  SyntheticDLM m = random_dlm(rng, k, 4);
  // move w0 onto A w = (1, 0.3)
  Vector target(2);
  target << 1.0, 0.3;
  m.initial_state += a.transpose() * (a * a.transpose()).ldlt().solve(target - a * m.initial_state);
  for (auto& w : m.evolution) w = project_evolution_covariance(*w, a);
  const auto s = backward_smooth(forward_filter(m), m);
  for (int t = 0; t < 4; ++t) {
    EXPECT_LE(max_abs(a * s.mean[t] - target), 1e-9);
    EXPECT_LE(max_abs(a * s.cov[t] * a.transpose()), 1e-9);
  }
}

TEST(BackwardSmooth, RejectsMismatchedFilter) {
  std::mt19937_64 rng(2);
  const SyntheticDLM m2 = random_dlm(rng, 2, 2);
  const SyntheticDLM m3 = random_dlm(rng, 2, 3);
  try {
    backward_smooth(forward_filter(m2), m3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::shape_error);
  }
}

TEST(BackwardSample, ZeroEvolutionIsConstant) {
  std::mt19937_64 rng(4);
  SyntheticDLM m = random_dlm(rng, 3, 4);
  for (auto& w : m.evolution) w = Matrix::Zero(3, 3);
  const auto draw = backward_sample(forward_filter(m), m, 99u);
  for (const auto& w : draw.mean) EXPECT_LE(max_abs(w - m.initial_state), 1e-14);
}

TEST(BackwardSample, SumToOneEveryDraw) {
  std::mt19937_64 rng(8);
  const SyntheticDLM m = sum_to_one_dlm(rng, 2, 4);
  const auto f = forward_filter(m);
  Rng r(1);
  for (int i = 0; i < 200; ++i) {
    const auto draw = backward_sample(f, m, r);
    for (const auto& w : draw.mean) EXPECT_NEAR(w.sum(), 1.0, 1e-10);
  }
}

TEST(BackwardSample, Reproducible) {
  std::mt19937_64 rng(8);
  const SyntheticDLM m = random_dlm(rng, 3, 3);
  const auto f = forward_filter(m);
  const auto a = backward_sample(f, m, 1234u);
  const auto b = backward_sample(f, m, 1234u);
  for (int t = 0; t < 3; ++t) EXPECT_EQ(a.mean[t], b.mean[t]);
}

TEST(BackwardSample, MomentsMatchSmoother) {
  std::mt19937_64 rng(17);
  const SyntheticDLM m = random_dlm(rng, 2, 2);
  const auto f = forward_filter(m);
  const auto s = backward_smooth(f, m);
  const int n = 10000;
  Rng r(2024);
  Vector sum = Vector::Zero(2);
  Matrix sq = Matrix::Zero(2, 2);
  for (int i = 0; i < n; ++i) {
    const Vector w = backward_sample(f, m, r).mean[0];
    sum += w;
    sq += w * w.transpose();
  }
  const Vector mean = sum / n;
  const Matrix cov = sq / n - mean * mean.transpose();
  for (int j = 0; j < 2; ++j) {
    const double se = std::sqrt(s.cov[0](j, j) / n);
    EXPECT_LE(std::abs(mean(j) - s.mean[0](j)), 4 * se);
    // var of sample variance ~ 2 sigma^4 / n
    const double se_var = std::sqrt(2.0 / n) * s.cov[0](j, j);
    EXPECT_LE(std::abs(cov(j, j) - s.cov[0](j, j)), 4 * se_var);
  }
  const double se_cov = std::sqrt((s.cov[0](0, 0) * s.cov[0](1, 1) +
                                   s.cov[0](0, 1) * s.cov[0](0, 1)) / n);
  EXPECT_LE(std::abs(cov(0, 1) - s.cov[0](0, 1)), 4 * se_cov);
}

TEST(DiffuseStep, DecouplesAndMatchesMyopicSolve) {
  std::mt19937_64 rng(31);
  SyntheticDLM m = random_dlm(rng, 3, 3);
  m.evolution[1] = std::nullopt;
  const auto f = forward_filter(m);
  EXPECT_TRUE(f.steps[1].diffuse);
  // Step 2 posterior is the information-form solution of its own blocks.
  Matrix prec = Matrix::Zero(3, 3);
  Vector info = Vector::Zero(3);
  for (const auto& b : m.observations[1]) {
    const Matrix vi = b.covariance.inverse();
    prec += b.design.transpose() * vi * b.design;
    info += b.design.transpose() * vi * b.value;
  }
  EXPECT_LE(max_abs(f.steps[1].mean - prec.ldlt().solve(info)), 1e-10);
  const auto s = backward_smooth(f, m);
  EXPECT_EQ(s.mean[0], f.steps[0].mean);
}

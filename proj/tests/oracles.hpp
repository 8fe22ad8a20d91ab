#pragma once

// Independent dense reference computations and random instance generators.
// Nothing here calls the recursive filter/smoother.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "emuport/ffbs.hpp"
#include "emuport/loss.hpp"

namespace emuport::testing {

inline Matrix random_spd(std::mt19937_64& rng, Eigen::Index k, double scale = 1.0,
                         double ridge = 0.5) {
  std::normal_distribution<double> n;
  Matrix b(k, k);
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j) b(i, j) = n(rng);
  return scale * (b * b.transpose() / static_cast<double>(k) +
                  ridge * Matrix::Identity(k, k));
}

inline Vector random_vector(std::mt19937_64& rng, Eigen::Index k, double sd = 1.0,
                            double mean = 0.0) {
  std::normal_distribution<double> n(mean, sd);
  Vector v(k);
  for (Eigen::Index i = 0; i < k; ++i) v(i) = n(rng);
  return v;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Matrix random_psd_rank(std::mt19937_64& rng, Eigen::Index k, Eigen::Index rank) {
  std::normal_distribution<double> n;
  Matrix b(k, rank);
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < rank; ++j) b(i, j) = n(rng);
  return b * b.transpose();
}

inline Matrix dense_pinv(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  Vector inv = Vector::Zero(s.size());
  const double cut = 1e-13 * (s.size() ? s(0) : 0.0);
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > cut) inv(i) = 1.0 / s(i);
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// Joint Gaussian posterior over the stacked states (w_1..w_h), computed by
/// building the full prior covariance and observation matrix.
struct DenseGaussianPosterior {
  Vector mean;  // hk
  Matrix cov;   // hk x hk
  Vector block(int t, Eigen::Index k) const { return mean.segment(t * k, k); }
  Matrix cov_block(int t, Eigen::Index k) const { return cov.block(t * k, t * k, k, k); }
};

inline DenseGaussianPosterior dense_posterior(const SyntheticDLM& model) {
  const auto k = model.state_dim();
  const int h = model.horizon();
  const auto n = h * k;
  Vector mu(n);
  Matrix prior = Matrix::Zero(n, n);
  std::vector<Matrix> cumulative(h);
  Matrix acc = Matrix::Zero(k, k);
  for (int t = 0; t < h; ++t) {
    acc += *model.evolution[t];
    cumulative[t] = acc;
    mu.segment(t * k, k) = model.initial_state;
  }
  for (int s = 0; s < h; ++s)
    for (int t = 0; t < h; ++t) prior.block(s * k, t * k, k, k) = cumulative[std::min(s, t)];

  Eigen::Index rows = 0;
  for (const auto& blocks : model.observations)
    for (const auto& b : blocks) rows += b.value.size();
  Matrix hmat = Matrix::Zero(rows, n);
  Matrix v = Matrix::Zero(rows, rows);
  Vector y(rows);
  Eigen::Index r = 0;
  for (int t = 0; t < h; ++t) {
    for (const auto& b : model.observations[t]) {
      const auto m = b.value.size();
      hmat.block(r, t * k, m, k) = b.design;
      v.block(r, r, m, m) = b.covariance;
      y.segment(r, m) = b.value;
      r += m;
    }
  }
  const Matrix s = hmat * prior * hmat.transpose() + v;
  const Matrix gain = prior * hmat.transpose() * dense_pinv(s);
  DenseGaussianPosterior out;
  out.mean = mu + gain * (y - hmat * mu);
  out.cov = prior - gain * hmat * prior;
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  return out;
}

/// Minimizer of the normal-family loss over all stacked w_{1:h} by a dense
/// KKT system (quadratic form assembled term by term from the loss).
inline Path dense_kkt_solve(const ForecastMoments& fm, const LossSpec& spec) {
  const auto k = fm.dim();
  const int h = fm.horizon();
  const auto n = h * k;
  Matrix q = Matrix::Zero(n, n);
  Vector b = Vector::Zero(n);
  Matrix base = spec.turnover_diag.size() ? Matrix(spec.turnover_diag.asDiagonal())
                                          : Matrix::Identity(k, k);
  if (spec.constraint) {
    const Matrix& a = spec.constraint->A;
    base = base - base * a.transpose() * (a * base * a.transpose()).inverse() * a * base;
  }
  const Matrix m = dense_pinv(base);
  for (int t = 0; t < h; ++t) {
    auto qtt = q.block(t * k, t * k, k, k);
    if (std::isfinite(spec.alpha[t])) {
      qtt += fm.mean[t] * fm.mean[t].transpose() / spec.alpha[t];
      b.segment(t * k, k) += spec.target[t] * fm.mean[t] / spec.alpha[t];
    }
    if (std::isfinite(spec.beta[t])) qtt += fm.precision[t].inverse() / spec.beta[t];
    if (std::isfinite(spec.lambda[t])) {
      const Matrix ml = m / spec.lambda[t];
      qtt += ml;
      if (t == 0) {
        b.segment(0, k) += ml * spec.w0;
      } else {
        q.block((t - 1) * k, (t - 1) * k, k, k) += ml;
        q.block(t * k, (t - 1) * k, k, k) -= ml;
        q.block((t - 1) * k, t * k, k, k) -= ml;
      }
    }
  }
  const Eigen::Index nc = spec.constraint ? spec.constraint->A.rows() * h : 0;
  Matrix kkt = Matrix::Zero(n + nc, n + nc);
  Vector rhs = Vector::Zero(n + nc);
  kkt.topLeftCorner(n, n) = 2.0 * q;
  rhs.head(n) = 2.0 * b;
  if (spec.constraint) {
    const auto nr = spec.constraint->A.rows();
    for (int t = 0; t < h; ++t) {
      kkt.block(n + t * nr, t * k, nr, k) = spec.constraint->A;
      kkt.block(t * k, n + t * nr, k, nr) = spec.constraint->A.transpose();
      rhs.segment(n + t * nr, nr) = spec.constraint->a;
    }
  }
  const Vector sol = kkt.fullPivLu().solve(rhs);
  Path out(h);
  for (int t = 0; t < h; ++t) out[t] = sol.segment(t * k, k);
  return out;
}

inline double max_path_diff(const Path& a, const Path& b) {
  double d = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) d = std::max(d, (a[t] - b[t]).cwiseAbs().maxCoeff());
  return d;
}

/// Random normal-family instance with O(1) scales.
struct NormalInstance {
  ForecastMoments fm;
  LossSpec spec;
};

inline NormalInstance random_normal_instance(std::mt19937_64& rng, Eigen::Index k, int h,
                                             bool sum_to_one) {
  NormalInstance in;
  for (int t = 0; t < h; ++t) {
    in.fm.mean.push_back(random_vector(rng, k, 0.5));
    in.fm.precision.push_back(random_spd(rng, k));
  }
  Vector w0 = random_vector(rng, k, 0.5);
  if (sum_to_one) w0.array() += (1.0 - w0.sum()) / static_cast<double>(k);
  in.spec.family = LossFamily::normal;
  in.spec.w0 = w0;
  for (int t = 0; t < h; ++t) {
    in.spec.alpha.push_back(uniform(rng, 0.2, 5.0));
    in.spec.beta.push_back(uniform(rng, 0.2, 5.0));
    in.spec.lambda.push_back(uniform(rng, 0.1, 10.0));
    in.spec.gamma.push_back(kInf);
    in.spec.target.push_back(uniform(rng, -0.5, 0.5));
  }
  if (sum_to_one) in.spec.constraint = LinearConstraint::sum_to_one(k);
  return in;
}

inline NormalInstance laplace_instance(std::mt19937_64& rng, Eigen::Index k, int h, bool c,
                                       LossFamily fam, double gamma = kInf) {
  auto in = random_normal_instance(rng, k, h, c);
  in.spec.family = fam;
  in.spec.gamma.assign(h, gamma);
  return in;
}

// Density of one turnover increment d = x_t - x_{t-1} on the k = 2
// sum-to-one line, w = (x, 1 - x). Given scales the increment is normal with
// variance tau1 tau2 / (tau1 + tau2); the scales are iid exponential with
// mean 2 lambda^2. Writing s = tau1 + tau2, u = tau1 / s = sin^2(th), the s
// integral is a Bessel K_{3/2} in closed form and the th integral is smooth.
inline double k2_increment_density(double d, double lambda, int nodes = 400) {
  const double r = 1.0 / (2.0 * lambda * lambda);
  const double half_pi = 0.5 * M_PI;
  double total = 0.0;
  for (int i = 0; i < nodes; ++i) {
    const double th = (i + 0.5) * half_pi / nodes;
    const double c = std::pow(std::sin(th) * std::cos(th), 2);
    double j;  // int_0^inf s^{1/2} exp(-r s - q / s) ds
    if (d == 0.0) {
      j = 0.5 * std::sqrt(M_PI) * std::pow(r, -1.5);
    } else {
      const double q = d * d / (2.0 * c);
      const double z = 2.0 * std::sqrt(q * r);
      const double k32 = std::sqrt(M_PI / (2.0 * z)) * std::exp(-z) * (1.0 + 1.0 / z);
      j = 2.0 * std::pow(q / r, 0.75) * k32;
    }
    // r^2 (2 pi c)^{-1/2} j du with du = 2 sin cos dth
    total += 2.0 * r * r * j / std::sqrt(2.0 * M_PI) * (half_pi / nodes);
  }
  return total;
}

struct GridMarginal {
  std::vector<double> x;
  std::vector<double> density;  // normalized on the grid
  double mode = 0.0;
  double mean = 0.0;
};

/// Marginal density of x_1 for a k = 2, h = 2 sum-to-one Laplace instance by
/// direct 2-d quadrature over (x_1, x_2) on [lo, hi] with the given step.
inline GridMarginal k2h2_marginal_quadrature(const ForecastMoments& fm, const LossSpec& spec,
                                             double lo, double hi, double step) {
  const int n = static_cast<int>(std::floor((hi - lo) / step)) + 1;
  std::vector<double> x(n);
  for (int i = 0; i < n; ++i) x[i] = lo + i * step;
  const auto ell = [&](int t, double xv) {
    const Vector w = (Vector(2) << xv, 1.0 - xv).finished();
    const double res = spec.target[t] - fm.mean[t].dot(w);
    const double risk = w.dot(fm.precision[t].ldlt().solve(w));
    return res * res / spec.alpha[t] + risk / spec.beta[t];
  };
  std::vector<double> lg(2 * n - 1);  // log increment density by grid offset
  for (int o = -(n - 1); o <= n - 1; ++o)
    lg[o + n - 1] = std::log(k2_increment_density(o * step, spec.lambda[1]));
  std::vector<double> l1(n), l2(n), first(n);
  for (int i = 0; i < n; ++i) {
    l1[i] = -0.5 * ell(0, x[i]);
    l2[i] = -0.5 * ell(1, x[i]);
    first[i] = std::log(k2_increment_density(x[i] - spec.w0(0), spec.lambda[0]));
  }
  std::vector<double> logp(n);
  for (int i = 0; i < n; ++i) {
    double m = -kInf;
    for (int j = 0; j < n; ++j) m = std::max(m, l2[j] + lg[j - i + n - 1]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::exp(l2[j] + lg[j - i + n - 1] - m);
    logp[i] = l1[i] + first[i] + m + std::log(s);
  }
  const double top = *std::max_element(logp.begin(), logp.end());
  GridMarginal out;
  out.x = x;
  out.density.resize(n);
  double z = 0.0;
  for (int i = 0; i < n; ++i) z += out.density[i] = std::exp(logp[i] - top);
  for (int i = 0; i < n; ++i) {
    out.density[i] /= z;
    out.mean += out.density[i] * x[i];
  }
  out.mode = x[std::max_element(logp.begin(), logp.end()) - logp.begin()];
  return out;
}

/// Synthetic DLM with random SPD blocks (k-dim states, one scalar and one
/// identity block per step).
inline SyntheticDLM random_dlm(std::mt19937_64& rng, Eigen::Index k, int h) {
  SyntheticDLM m;
  m.initial_state = random_vector(rng, k);
  for (int t = 0; t < h; ++t) {
    m.observations.push_back({
        ObservationBlock::scalar(random_vector(rng, k), uniform(rng, -1, 1), uniform(rng, 0.1, 2)),
        ObservationBlock::identity(random_vector(rng, k), random_spd(rng, k)),
    });
    m.evolution.emplace_back(random_spd(rng, k, 0.5));
  }
  return m;
}

}  // namespace emuport::testing

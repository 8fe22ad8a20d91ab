#pragma once

// Equal-weight normal mixtures whose components may share a singular
// covariance range (constrained portfolios), their log density, and the
// fixed-point mode search w <- (sum_i p_i C_i^-)^{-1} sum_i p_i C_i^- m_i.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "emuport/linalg.hpp"

namespace emuport {

class MixtureOfNormals {
 public:
  MixtureOfNormals() = default;

  /// Components must share dimension and covariance range; densities are
  /// taken on that range (pseudo-determinant, eigenvalue cutoff 1e-12).
  MixtureOfNormals(std::vector<Vector> means, std::vector<Matrix> covs)
      : means_(std::move(means)), covs_(std::move(covs)) {
    require(!means_.empty() && means_.size() == covs_.size(), ErrorCode::shape_error,
            "mixture needs matching, non-empty mean and covariance lists");
    const auto k = means_[0].size();
    Matrix avg = Matrix::Zero(k, k);
    for (std::size_t i = 0; i < covs_.size(); ++i) {
      require(means_[i].size() == k && covs_[i].rows() == k && covs_[i].cols() == k,
              ErrorCode::shape_error, "mixture component dimension");
      require_symmetric(covs_[i], "mixture component covariance", 1e-8);
      avg += covs_[i] / static_cast<double>(covs_.size());
    }
    const SymmetricEigen eig(avg, kEigenCutoff);
    basis_ = eig.range_basis();
    anchor_ = means_[0];
    const auto r = basis_.cols();
    reduced_means_.reserve(size());
    std::vector<Matrix> whiten;
    log_norm_.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) {
      const Matrix s = symmetrize(basis_.transpose() * covs_[i] * basis_);
      Eigen::LLT<Matrix> llt(s);
      require(llt.info() == Eigen::Success, ErrorCode::invalid_covariance,
              "mixture components do not share a covariance range");
      const Matrix full = covs_[i] - basis_ * s * basis_.transpose();
      require(max_abs(full) <= 1e-8 * std::max(1.0, max_abs(covs_[i])),
              ErrorCode::invalid_covariance, "mixture component leaves the shared range");
      const Matrix l = llt.matrixL();
      const double logdet = 2.0 * l.diagonal().array().log().sum();
      log_norm_.push_back(-0.5 * (static_cast<double>(r) * std::log(2.0 * M_PI) + logdet));
      reduced_means_.push_back(to_reduced(means_[i]));
      precisions_.push_back(llt.solve(Matrix::Identity(r, r)));
      whiten.push_back(l.triangularView<Eigen::Lower>().solve(Matrix::Identity(r, r)));
    }
    // stacked whitening maps: block i of stacked_ z - offsets_ is L_i^{-1}(z - m_i)
    stacked_.resize(static_cast<Eigen::Index>(size()) * r, r);
    offsets_.resize(static_cast<Eigen::Index>(size()) * r);
    for (std::size_t i = 0; i < size(); ++i) {
      const auto row = static_cast<Eigen::Index>(i) * r;
      stacked_.middleRows(row, r) = whiten[i];
      offsets_.segment(row, r) = whiten[i] * reduced_means_[i];
    }
  }

  std::size_t size() const { return means_.size(); }
  Eigen::Index dim() const { return means_.empty() ? 0 : means_[0].size(); }
  Eigen::Index rank() const { return basis_.cols(); }
  const std::vector<Vector>& means() const { return means_; }
  const std::vector<Matrix>& covariances() const { return covs_; }
  const Matrix& range_basis() const { return basis_; }

  /// Distance from w to the affine support anchor + range.
  double off_support(const Vector& w) const {
    const Vector d = w - anchor_;
    return (d - basis_ * (basis_.transpose() * d)).cwiseAbs().maxCoeff();
  }

  Vector to_reduced(const Vector& w) const { return basis_.transpose() * (w - anchor_); }
  Vector from_reduced(const Vector& z) const { return anchor_ + basis_ * z; }

  /// Per-component log densities at reduced coordinates z.
  std::vector<double> component_logdensities(const Vector& z) const {
    std::vector<double> out(size());
    const Vector y = stacked_ * z - offsets_;
    const auto r = rank();
    for (std::size_t i = 0; i < size(); ++i)
      out[i] = log_norm_[i] - 0.5 * y.segment(static_cast<Eigen::Index>(i) * r, r).squaredNorm();
    return out;
  }

  const Vector& reduced_mean(std::size_t i) const { return reduced_means_[i]; }
  const Matrix& reduced_precision(std::size_t i) const { return precisions_[i]; }

 private:
  std::vector<Vector> means_;
  std::vector<Matrix> covs_;
  Matrix basis_;
  Vector anchor_;
  std::vector<Vector> reduced_means_;
  Matrix stacked_;
  Vector offsets_;
  std::vector<Matrix> precisions_;
  std::vector<double> log_norm_;
};

inline double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// log p(w) with equal weights; -inf off the support by more than 1e-8.
inline double mixture_logdensity(const MixtureOfNormals& mix, const Vector& w) {
  require(w.size() == mix.dim(), ErrorCode::shape_error, "mixture density point dimension");
  if (mix.off_support(w) > 1e-8) return -std::numeric_limits<double>::infinity();
  const auto logs = mix.component_logdensities(mix.to_reduced(w));
  return log_sum_exp(logs) - std::log(static_cast<double>(mix.size()));
}

struct ModeSearchConfig {
  int starts = 10;
  int max_iters = 5000;
  double tol = 1e-11;  // on the step norm
  // Components whose means are within this distance of an earlier start are
  // skipped as starts (0 disables).
  double dedupe_tol = 0.0;

  void validate() const {
    require(starts >= 1, ErrorCode::invalid_spec, "mode search needs at least one start");
    require(max_iters >= 1 && tol > 0.0 && dedupe_tol >= 0.0, ErrorCode::invalid_spec,
            "mode search tolerances");
  }
};

struct FixedPointResult {
  Vector w;
  double residual = 0.0;  // |w - map(w)| at the returned point
  double log_density = 0.0;
  int iterations = 0;     // map applications accepted as updates
  bool converged = false;
};

namespace detail {

// One application of the fixed-point map in reduced coordinates.
inline Vector mode_map(const MixtureOfNormals& mix, const Vector& z) {
  const auto logs = mix.component_logdensities(z);
  const double lse = log_sum_exp(logs);
  require(std::isfinite(lse), ErrorCode::flat_region,
          "all mixture components have zero density at the current iterate");
  const auto r = z.size();
  Matrix prec = Matrix::Zero(r, r);
  Vector info = Vector::Zero(r);
  for (std::size_t i = 0; i < mix.size(); ++i) {
    const double p = std::exp(logs[i] - lse);
    if (p < 1e-300) continue;
    prec += p * mix.reduced_precision(i);
    info += p * (mix.reduced_precision(i) * mix.reduced_mean(i));
  }
  const Eigen::LLT<Matrix> llt(symmetrize(prec));
  const double scale = std::max(max_abs(prec), 1e-300);
  bool ok = llt.info() == Eigen::Success;
  if (ok) {
    const Matrix l = llt.matrixL();
    ok = l.diagonal().minCoeff() > std::sqrt(1e-14 * scale);
  }
  require(ok, ErrorCode::flat_region,
          "weighted precision is numerically singular (flat region of the mixture)");
  return llt.solve(info);
}

}  // namespace detail

inline FixedPointResult fixed_point_mode(const MixtureOfNormals& mix, const Vector& start,
                                         const ModeSearchConfig& cfg = {}) {
  cfg.validate();
  require(start.size() == mix.dim(), ErrorCode::shape_error, "mode search start dimension");
  require(mix.off_support(start) <= 1e-8, ErrorCode::invalid_spec,
          "mode search start is outside the mixture support");
  FixedPointResult out;
  Vector z = mix.to_reduced(start);
  // stops at the first z with |map(z) - z| < tol and returns that z, so the
  // reported residual is the measured one
  for (;;) {
    Vector next = detail::mode_map(mix, z);
    out.residual = (next - z).norm();
    if (out.residual < cfg.tol) {
      out.converged = true;
      break;
    }
    if (out.iterations == cfg.max_iters) break;
    z = std::move(next);
    ++out.iterations;
  }
  out.w = mix.from_reduced(z);
  out.log_density = mixture_logdensity(mix, out.w);
  return out;
}

struct MarginalMode {
  Vector w;
  double log_density = 0.0;
  double residual = 0.0;
  int starts_run = 0;
  int starts_failed = 0;
  bool fell_back = false;  // every search failed; w is the best component mean
};

/// Multi-start fixed-point search from the component means with the highest
/// mixture density.
inline MarginalMode find_marginal_mode(const MixtureOfNormals& mix,
                                       const ModeSearchConfig& cfg = {}) {
  cfg.validate();
  require(mix.size() > 0, ErrorCode::invalid_spec, "empty mixture");
  std::vector<double> dens(mix.size());
  for (std::size_t i = 0; i < mix.size(); ++i)
    dens[i] = mixture_logdensity(mix, mix.means()[i]);
  std::vector<std::size_t> order(mix.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dens[a] > dens[b]; });

  MarginalMode best;
  best.w = mix.means()[order[0]];
  best.log_density = dens[order[0]];
  best.fell_back = true;
  std::vector<Vector> used;
  for (std::size_t idx : order) {
    if (best.starts_run >= cfg.starts) break;
    const Vector& m = mix.means()[idx];
    if (cfg.dedupe_tol > 0.0 &&
        std::any_of(used.begin(), used.end(),
                    [&](const Vector& u) { return (u - m).norm() < cfg.dedupe_tol; }))
      continue;
    used.push_back(m);
    ++best.starts_run;
    try {
      const auto res = fixed_point_mode(mix, m, cfg);
      if (best.fell_back || res.log_density > best.log_density) {
        best.w = res.w;
        best.log_density = std::max(res.log_density, best.log_density);
        best.residual = res.residual;
        best.fell_back = false;
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::flat_region) throw;
      ++best.starts_failed;
    }
  }
  return best;
}

}  // namespace emuport

#pragma once

// Forward filtering, backward smoothing and backward sampling for
// conditionally normal random-walk state-space models:
//
//   y_{t,b} = F_{t,b} w_t + N(0, V_{t,b})   for each observation block b
//   w_t     = w_{t-1} + N(0, W_t)           w_0 known
//
// W_t may be singular (linear constraints) and a step may be "diffuse"
// (no link to w_{t-1}, uniform prior over the affine set w_0 + span(basis)).

#include <optional>
#include <string>
#include <vector>

#include "emuport/linalg.hpp"
#include "emuport/random.hpp"

namespace emuport {

struct ObservationBlock {
  Matrix design;      // rows x k
  Vector value;       // rows
  Matrix covariance;  // rows x rows, symmetric PSD

  static ObservationBlock scalar(const Vector& row, double value, double variance) {
    ObservationBlock b;
    b.design = row.transpose();
    b.value = Vector::Constant(1, value);
    b.covariance = Matrix::Constant(1, 1, variance);
    return b;
  }

  static ObservationBlock identity(const Vector& value, const Matrix& covariance) {
    ObservationBlock b;
    b.design = Matrix::Identity(value.size(), value.size());
    b.value = value;
    b.covariance = covariance;
    return b;
  }
};

struct SyntheticDLM {
  Vector initial_state;
  std::vector<std::vector<ObservationBlock>> observations;  // per t = 1..h
  std::vector<std::optional<Matrix>> evolution;              // nullopt: diffuse step
  Matrix diffuse_basis;  // k x r orthonormal; empty means the identity
  // When set, the state lives on {A w = a}; every W_t must satisfy A W_t = 0
  // (components outside null(A) are discarded).
  std::optional<LinearConstraint> state_constraint;

  Eigen::Index state_dim() const { return initial_state.size(); }
  int horizon() const { return static_cast<int>(evolution.size()); }

  Matrix free_basis() const {
    if (diffuse_basis.size()) return diffuse_basis;
    if (state_constraint) return null_space_basis(state_constraint->A);
    return Matrix::Identity(state_dim(), state_dim());
  }

  void validate() const {
    const auto k = state_dim();
    require(k > 0, ErrorCode::shape_error, "state dimension must be positive");
    require(horizon() > 0, ErrorCode::shape_error, "horizon must be positive");
    require(observations.size() == evolution.size(), ErrorCode::shape_error,
            "observation and evolution lists differ in length");
    if (diffuse_basis.size())
      require(diffuse_basis.rows() == k, ErrorCode::shape_error,
              "diffuse basis row count must equal the state dimension");
    if (state_constraint) {
      state_constraint->validate(k);
      require(state_constraint->residual(initial_state) <=
                  1e-9 * std::max(1.0, max_abs(initial_state)),
              ErrorCode::invalid_spec, "initial state violates the state constraint");
    }
    for (int t = 0; t < horizon(); ++t) {
      const std::string at = " at t=" + std::to_string(t + 1);
      if (evolution[t]) {
        require(evolution[t]->rows() == k && evolution[t]->cols() == k,
                ErrorCode::shape_error, "evolution covariance" + at);
        require_psd(*evolution[t], "evolution covariance" + at);
      }
      for (const auto& b : observations[t]) {
        require(b.design.cols() == k && b.design.rows() == b.value.size() &&
                    b.covariance.rows() == b.value.size() &&
                    b.covariance.cols() == b.value.size(),
                ErrorCode::shape_error, "observation block" + at);
        require_psd(b.covariance, "observation covariance" + at);
      }
    }
  }
};

struct FilterStep {
  Vector prior_mean;  // a_t
  Matrix prior_cov;   // R_t; empty when the step is diffuse
  Vector mean;        // mu_t
  Matrix cov;         // C_t
  bool diffuse = false;
};

struct FilterMoments {
  std::vector<FilterStep> steps;
  int horizon() const { return static_cast<int>(steps.size()); }
};

struct SmoothedPath {
  std::vector<Vector> mean;  // s_t (or the sampled w_t)
  std::vector<Matrix> cov;   // S_t; empty matrices for sampled paths
  bool sampled = false;
  int horizon() const { return static_cast<int>(mean.size()); }
};

namespace detail {

// Joseph-form update of (mean, cov) with one observation block. Innovation
// variance directions that are numerically zero carry no information and are
// skipped (this is also the exact-information branch for zero observation
// variance once the constrained direction is pinned).
inline bool block_is_regular(const ObservationBlock& b) {
  return is_positive_definite(b.covariance);
}

inline void kalman_update(Vector& mean, Matrix& cov, const ObservationBlock& b) {
  const Matrix fc = b.design * cov;
  const Matrix q = symmetrize(fc * b.design.transpose() + b.covariance);
  Matrix qinv;
  if (block_is_regular(b)) {
    // Information form when the prior is PD: stable when cov is much wider
    // than V in some directions, where q is ill conditioned.
    const Eigen::LLT<Matrix> lr(symmetrize(cov));
    if (lr.info() == Eigen::Success) {
      const Eigen::LLT<Matrix> lv(symmetrize(b.covariance));
      const Matrix vinv_f = lv.solve(b.design);
      const auto k = mean.size();
      const Matrix prec = symmetrize(lr.solve(Matrix::Identity(k, k)) +
                                     b.design.transpose() * vinv_f);
      const Eigen::LLT<Matrix> lp(prec);
      if (lp.info() == Eigen::Success) {
        mean += lp.solve(vinv_f.transpose() * (b.value - b.design * mean));
        cov = symmetrize(lp.solve(Matrix::Identity(k, k)));
        return;
      }
    }
    qinv = Eigen::LLT<Matrix>(q).solve(Matrix::Identity(q.rows(), q.cols()));
  } else {
    const double scale = std::max(
        {max_abs(q), b.design.squaredNorm() * max_abs(cov), max_abs(b.covariance)});
    if (scale == 0.0) return;
    Eigen::SelfAdjointEigenSolver<Matrix> solver(q);
    Vector inv = Vector::Zero(q.rows());
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      const double v = solver.eigenvalues()(i);
      if (v > kEigenCutoff * scale) inv(i) = 1.0 / v;
    }
    if (inv.isZero()) return;
    qinv = solver.eigenvectors() * inv.asDiagonal() * solver.eigenvectors().transpose();
  }
  const Matrix gain = fc.transpose() * qinv;
  mean += gain * (b.value - b.design * mean);
  const auto k = mean.size();
  const Matrix ikf = Matrix::Identity(k, k) - gain * b.design;
  cov = symmetrize(ikf * cov * ikf.transpose() +
                   gain * b.covariance * gain.transpose());
}

// Posterior for a diffuse step: information form over the blocks with
// positive-definite covariance, restricted to anchor + span(basis); blocks
// with singular covariance are then applied as ordinary Kalman updates.
inline void diffuse_update(const Vector& anchor, const Matrix& basis,
                           const std::vector<ObservationBlock>& blocks,
                           Vector& mean, Matrix& cov, int t) {
  const auto r = basis.cols();
  Matrix precision = Matrix::Zero(r, r);
  Vector info = Vector::Zero(r);
  std::vector<const ObservationBlock*> singular;
  for (const auto& b : blocks) {
    if (!block_is_regular(b)) {
      singular.push_back(&b);
      continue;
    }
    const Matrix fb = b.design * basis;
    const Eigen::LLT<Matrix> llt(symmetrize(b.covariance));
    precision += fb.transpose() * llt.solve(fb);
    info += fb.transpose() * llt.solve(b.value - b.design * anchor);
  }
  precision = symmetrize(precision);
  const Eigen::LLT<Matrix> llt(precision);
  require(r == 0 || llt.info() == Eigen::Success,
          ErrorCode::invalid_spec,
          "diffuse step at t=" + std::to_string(t + 1) +
              " is not identified by its observations");
  const Vector z = r ? Vector(llt.solve(info)) : Vector::Zero(0);
  mean = anchor + basis * z;
  cov = r ? symmetrize(basis * llt.solve(Matrix::Identity(r, r)) * basis.transpose())
          : Matrix::Zero(anchor.size(), anchor.size());
  for (const auto* b : singular) kalman_update(mean, cov, *b);
}

// Coordinates z = w_N (the non-basic entries) with w = anchor + basis * z,
// the basic entries w_B being eliminated through A_B w_B = a - A_N w_N.
// Basic columns are picked where the evolution variance is largest, so
// directions pinned by tiny variances stay axis-aligned in z; Cholesky is
// insensitive to such diagonal scaling where a rotated basis is not.
struct Reduction {
  Vector anchor;              // initial state (feasible)
  Matrix basis;               // k x (k - n), identity on the free rows
  std::vector<Eigen::Index> free;  // z-index -> state index

  Vector down(const Vector& w) const {
    Vector z(free.size());
    for (std::size_t i = 0; i < free.size(); ++i) z(i) = w(free[i]) - anchor(free[i]);
    return z;
  }
  Matrix down(const Matrix& c) const {
    const auto r = static_cast<Eigen::Index>(free.size());
    Matrix out(r, r);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < r; ++j) out(i, j) = c(free[i], free[j]);
    return symmetrize(out);
  }
  Vector up(const Vector& z) const { return anchor + basis * z; }
  Matrix up(const Matrix& c) const { return symmetrize(basis * c * basis.transpose()); }
};

inline Reduction make_reduction(const SyntheticDLM& m) {
  const Matrix& a = m.state_constraint->A;
  const auto k = m.state_dim();
  const auto n = a.rows();
  // geometric mean of the evolution variances (free most often wins)
  Vector score = Vector::Zero(k);
  int steps = 0;
  for (const auto& w : m.evolution)
    if (w) {
      score += w->diagonal().cwiseMax(1e-300).array().log().matrix();
      ++steps;
    }
  score = steps ? Vector((score / (2.0 * steps)).array().exp()) : Vector::Ones(k);
  const Matrix weighted = a * score.asDiagonal();
  Eigen::ColPivHouseholderQR<Matrix> qr(weighted);
  const auto& perm = qr.colsPermutation().indices();
  std::vector<bool> basic(k, false);
  std::vector<Eigen::Index> basic_idx;
  for (Eigen::Index i = 0; i < n; ++i) {
    basic[perm(i)] = true;
    basic_idx.push_back(perm(i));
  }
  Reduction r;
  r.anchor = m.initial_state;
  for (Eigen::Index j = 0; j < k; ++j)
    if (!basic[j]) r.free.push_back(j);
  Matrix ab(n, n), an(n, static_cast<Eigen::Index>(r.free.size()));
  for (Eigen::Index i = 0; i < n; ++i) ab.col(i) = a.col(basic_idx[i]);
  for (std::size_t i = 0; i < r.free.size(); ++i) an.col(i) = a.col(r.free[i]);
  const Eigen::FullPivLU<Matrix> lu(ab);
  require(lu.isInvertible(), ErrorCode::invalid_spec, "state constraint is rank deficient");
  const Matrix elim = -lu.solve(an);
  r.basis = Matrix::Zero(k, an.cols());
  for (std::size_t i = 0; i < r.free.size(); ++i) r.basis(r.free[i], i) = 1.0;
  for (Eigen::Index i = 0; i < n; ++i) r.basis.row(basic_idx[i]) = elim.row(i);
  return r;
}

inline SyntheticDLM reduce_model(const SyntheticDLM& m, const Reduction& r) {
  SyntheticDLM out;
  out.initial_state = Vector::Zero(r.basis.cols());
  for (const auto& blocks : m.observations) {
    std::vector<ObservationBlock> red;
    for (const auto& b : blocks)
      red.push_back({b.design * r.basis, b.value - b.design * r.anchor, b.covariance});
    out.observations.push_back(std::move(red));
  }
  for (const auto& w : m.evolution)
    out.evolution.push_back(w ? std::optional<Matrix>(r.down(*w)) : std::nullopt);
  if (m.diffuse_basis.size()) {
    Matrix sel(r.free.size(), m.diffuse_basis.cols());
    for (std::size_t i = 0; i < r.free.size(); ++i) sel.row(i) = m.diffuse_basis.row(r.free[i]);
    Eigen::HouseholderQR<Matrix> qr(sel);
    out.diffuse_basis =
        qr.householderQ() * Matrix::Identity(r.basis.cols(), m.diffuse_basis.cols());
  }
  return out;
}

inline FilterMoments reduce_filter(const FilterMoments& f, const Reduction& r) {
  FilterMoments out = f;
  for (auto& s : out.steps) {
    s.prior_mean = r.down(s.prior_mean);
    if (s.prior_cov.size()) s.prior_cov = r.down(s.prior_cov);
    s.mean = r.down(s.mean);
    s.cov = r.down(s.cov);
  }
  return out;
}

inline FilterMoments lift_filter(FilterMoments f, const Reduction& r) {
  for (auto& s : f.steps) {
    s.prior_mean = r.up(s.prior_mean);
    if (s.prior_cov.size()) s.prior_cov = r.up(s.prior_cov);
    s.mean = r.up(s.mean);
    s.cov = r.up(s.cov);
  }
  return f;
}

inline SmoothedPath lift_path(SmoothedPath p, const Reduction& r) {
  for (int t = 0; t < p.horizon(); ++t) {
    p.mean[t] = r.up(p.mean[t]);
    if (p.cov[t].size() || !p.sampled) p.cov[t] = r.up(p.cov[t]);
  }
  return p;
}

inline void require_matching(const FilterMoments& f, const SyntheticDLM& m) {
  require(f.horizon() == m.horizon(), ErrorCode::shape_error,
          "filter moments and model differ in horizon");
  for (const auto& s : f.steps)
    require(s.mean.size() == m.state_dim(), ErrorCode::shape_error,
            "filter moments and model differ in state dimension");
}

}  // namespace detail

namespace detail {

// C R^{-1}, or C R^+ when R is singular.
inline Matrix smoother_gain(const Matrix& c, const Matrix& r) {
  const Eigen::LLT<Matrix> llt(symmetrize(r));
  if (llt.info() == Eigen::Success) return llt.solve(c.transpose()).transpose();
  return c * sym_pseudo_inverse(r);
}

inline FilterMoments filter_core(const SyntheticDLM& model) {
  const auto k = model.state_dim();
  FilterMoments out;
  out.steps.reserve(model.horizon());
  Vector mean = model.initial_state;
  Matrix cov = Matrix::Zero(k, k);
  for (int t = 0; t < model.horizon(); ++t) {
    FilterStep step;
    step.prior_mean = mean;
    if (model.evolution[t]) {
      step.prior_cov = symmetrize(cov + *model.evolution[t]);
      mean = step.prior_mean;
      cov = step.prior_cov;
      // regular blocks first: singular ones then see an already reduced cov
      for (int pass = 0; pass < 2; ++pass)
        for (const auto& b : model.observations[t])
          if (block_is_regular(b) == (pass == 0)) kalman_update(mean, cov, b);
    } else {
      step.diffuse = true;
      diffuse_update(model.initial_state, model.free_basis(), model.observations[t], mean,
                     cov, t);
    }
    step.mean = mean;
    step.cov = cov;
    out.steps.push_back(std::move(step));
  }
  return out;
}

inline SmoothedPath smooth_core(const FilterMoments& filter) {
  const int h = filter.horizon();
  SmoothedPath out;
  out.mean.resize(h);
  out.cov.resize(h);
  out.mean[h - 1] = filter.steps[h - 1].mean;
  out.cov[h - 1] = filter.steps[h - 1].cov;
  for (int t = h - 2; t >= 0; --t) {
    const auto& cur = filter.steps[t];
    const auto& next = filter.steps[t + 1];
    if (next.diffuse) {
      out.mean[t] = cur.mean;
      out.cov[t] = cur.cov;
      continue;
    }
    const Matrix gain = smoother_gain(cur.cov, next.prior_cov);
    out.mean[t] = cur.mean + gain * (out.mean[t + 1] - next.prior_mean);
    out.cov[t] = symmetrize(cur.cov +
                            gain * (out.cov[t + 1] - next.prior_cov) * gain.transpose());
  }
  return out;
}

inline SmoothedPath sample_core(const FilterMoments& filter, Rng& rng) {
  const int h = filter.horizon();
  SmoothedPath out;
  out.sampled = true;
  out.mean.resize(h);
  out.cov.assign(h, Matrix());
  out.mean[h - 1] = sample_gaussian(filter.steps[h - 1].mean, filter.steps[h - 1].cov, rng);
  for (int t = h - 2; t >= 0; --t) {
    const auto& cur = filter.steps[t];
    const auto& next = filter.steps[t + 1];
    if (next.diffuse) {
      out.mean[t] = sample_gaussian(cur.mean, cur.cov, rng);
      continue;
    }
    const Matrix gain = smoother_gain(cur.cov, next.prior_cov);
    const Vector m = cur.mean + gain * (out.mean[t + 1] - next.prior_mean);
    const Matrix c = symmetrize(cur.cov - gain * cur.cov.transpose());
    out.mean[t] = sample_gaussian(m, c, rng);
  }
  return out;
}

// The state is pinned when the constraints leave no free direction.
inline bool pinned(const SyntheticDLM& m) {
  return m.state_constraint && m.state_constraint->A.rows() == m.state_dim();
}

inline SmoothedPath pinned_path(const SyntheticDLM& m, bool sampled) {
  SmoothedPath out;
  out.sampled = sampled;
  const auto k = m.state_dim();
  out.mean.assign(m.horizon(), m.initial_state);
  out.cov.assign(m.horizon(), sampled ? Matrix() : Matrix(Matrix::Zero(k, k)));
  return out;
}

}  // namespace detail

/// Exact Gaussian filtering moments; observation blocks inside a step are
/// processed sequentially (regular before singular). With a state
/// constraint the recursion runs in coordinates of the constraint's null
/// space, which keeps it well conditioned when W_t is rank deficient.
inline FilterMoments forward_filter(const SyntheticDLM& model) {
  model.validate();
  if (detail::pinned(model)) {
    FilterMoments out;
    const auto k = model.state_dim();
    for (int t = 0; t < model.horizon(); ++t)
      out.steps.push_back({model.initial_state, Matrix::Zero(k, k), model.initial_state,
                           Matrix::Zero(k, k), false});
    return out;
  }
  if (!model.state_constraint) return detail::filter_core(model);
  const auto red = detail::make_reduction(model);
  return detail::lift_filter(detail::filter_core(detail::reduce_model(model, red)), red);
}

/// Rauch-Tung-Striebel smoothing with generalized inverses of R_{t+1}; the
/// returned means are the joint posterior mode of the model.
inline SmoothedPath backward_smooth(const FilterMoments& filter,
                                    const SyntheticDLM& model) {
  detail::require_matching(filter, model);
  if (detail::pinned(model)) return detail::pinned_path(model, false);
  if (!model.state_constraint) return detail::smooth_core(filter);
  const auto red = detail::make_reduction(model);
  return detail::lift_path(detail::smooth_core(detail::reduce_filter(filter, red)), red);
}

/// One draw of the full trajectory from the joint posterior. Singular
/// conditionals are sampled in their rank subspace.
inline SmoothedPath backward_sample(const FilterMoments& filter,
                                    const SyntheticDLM& model, Rng& rng) {
  detail::require_matching(filter, model);
  if (detail::pinned(model)) return detail::pinned_path(model, true);
  if (!model.state_constraint) return detail::sample_core(filter, rng);
  const auto red = detail::make_reduction(model);
  return detail::lift_path(detail::sample_core(detail::reduce_filter(filter, red), rng), red);
}

inline SmoothedPath backward_sample(const FilterMoments& filter,
                                    const SyntheticDLM& model, std::uint64_t seed) {
  Rng rng(seed);
  return backward_sample(filter, model, rng);
}

}  // namespace emuport

#pragma once

// Multi-step portfolio losses and their emulating state-space models.
//
//   normal:            sum_t  (m_t - f_t'w_t)^2/alpha_t + w_t'K_t^{-1}w_t/beta_t
//                             + (w_t - w_{t-1})'W_t^-(w_t - w_{t-1})/lambda_t
//   laplace:           turnover term replaced by 2/lambda_t * 1'|w_t - w_{t-1}|
//   extended_laplace:  laplace + 2/gamma_t * 1'|w_t|
//
// K_t is the forecast PRECISION of returns. Infinite weights switch the
// corresponding term off; alpha_t = 0 makes the target a hard constraint.

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "emuport/ffbs.hpp"
#include "emuport/linalg.hpp"

namespace emuport {

using Path = std::vector<Vector>;

enum class LossFamily { normal, laplace, extended_laplace };

constexpr std::string_view to_string(LossFamily f) noexcept {
  switch (f) {
    case LossFamily::normal: return "normal";
    case LossFamily::laplace: return "laplace";
    case LossFamily::extended_laplace: return "extended_laplace";
  }
  return "normal";
}

inline LossFamily parse_loss_family(std::string_view s) {
  if (s == "normal") return LossFamily::normal;
  if (s == "laplace") return LossFamily::laplace;
  if (s == "extended_laplace") return LossFamily::extended_laplace;
  fail(ErrorCode::invalid_spec, "unknown loss family '" + std::string(s) + "'");
}

/// Per-horizon forecast moments of simple returns.
struct ForecastMoments {
  std::vector<Vector> mean;       // f_t
  std::vector<Matrix> precision;  // K_t = V[r_t]^{-1}

  int horizon() const { return static_cast<int>(mean.size()); }
  Eigen::Index dim() const { return mean.empty() ? 0 : mean.front().size(); }

  Matrix covariance(int t) const {
    const Eigen::LLT<Matrix> llt(precision.at(t));
    return symmetrize(llt.solve(Matrix::Identity(dim(), dim())));
  }

  void validate() const {
    require(horizon() >= 1, ErrorCode::invalid_spec, "forecast horizon must be >= 1");
    require(precision.size() == mean.size(), ErrorCode::shape_error,
            "forecast means and precisions differ in horizon");
    const auto k = dim();
    for (int t = 0; t < horizon(); ++t) {
      require(mean[t].size() == k && precision[t].rows() == k &&
                  precision[t].cols() == k,
              ErrorCode::shape_error, "forecast moments dimension at t=" + std::to_string(t + 1));
      require_symmetric(precision[t], "forecast precision");
      require(is_positive_definite(precision[t]), ErrorCode::invalid_covariance,
              "forecast precision at t=" + std::to_string(t + 1) + " is not positive definite");
    }
  }
};

/// Hard linear constraints A w_t = a.
struct LossSpec {
  LossFamily family = LossFamily::normal;
  std::vector<double> alpha, beta, lambda, gamma, target;  // one entry per t
  Vector w0;
  std::optional<LinearConstraint> constraint;
  // Diagonal of the pre-projection turnover matrix; empty means I_k.
  Vector turnover_diag;

  int horizon() const { return static_cast<int>(target.size()); }

  static LossSpec constant(LossFamily family, int h, const Vector& w0, double alpha,
                           double beta, double lambda, double gamma = kInf,
                           double target = 0.0005,
                           std::optional<LinearConstraint> constraint = std::nullopt) {
    LossSpec s;
    s.family = family;
    s.alpha.assign(h, alpha);
    s.beta.assign(h, beta);
    s.lambda.assign(h, lambda);
    s.gamma.assign(h, gamma);
    s.target.assign(h, target);
    s.w0 = w0;
    s.constraint = std::move(constraint);
    return s;
  }

  void validate(Eigen::Index k) const {
    const auto h = static_cast<std::size_t>(horizon());
    require(h >= 1, ErrorCode::invalid_spec, "loss horizon must be >= 1");
    require(alpha.size() == h && beta.size() == h && lambda.size() == h && gamma.size() == h,
            ErrorCode::invalid_spec, "weight schedules must have one entry per horizon step");
    require(w0.size() == k, ErrorCode::shape_error, "w0 dimension does not match forecasts");
    for (std::size_t t = 0; t < h; ++t) {
      const std::string at = " at t=" + std::to_string(t + 1);
      require(alpha[t] >= 0.0, ErrorCode::invalid_spec, "alpha must be >= 0" + at);
      require(beta[t] > 0.0, ErrorCode::invalid_spec, "beta must be > 0" + at);
      require(lambda[t] > 0.0, ErrorCode::invalid_spec, "lambda must be > 0" + at);
      require(gamma[t] > 0.0, ErrorCode::invalid_spec, "gamma must be > 0" + at);
      require(std::isfinite(target[t]), ErrorCode::invalid_spec, "target must be finite" + at);
      if (family == LossFamily::normal)
        require(std::isfinite(lambda[t]), ErrorCode::invalid_spec,
                "normal loss needs finite lambda" + at);
    }
    if (turnover_diag.size()) {
      require(turnover_diag.size() == k, ErrorCode::shape_error, "turnover_diag dimension");
      require((turnover_diag.array() > 0.0).all(), ErrorCode::invalid_spec,
              "turnover_diag entries must be positive");
    }
    if (constraint) {
      constraint->validate(k);
      require(constraint->residual(w0) <= 1e-10, ErrorCode::invalid_spec,
              "w0 violates the linear constraint");
    }
  }
};

/// W = V - V A'(A V A')^{-1} A V: the covariance V conditioned on A w = 0.
inline Matrix project_evolution_covariance(const Matrix& v, const Matrix& a) {
  require_square(v, "evolution covariance");
  require(a.cols() == v.rows(), ErrorCode::shape_error, "constraint/covariance mismatch");
  if (a.rows() == 0) return v;
  const Matrix va = v * a.transpose();
  const Matrix ava = symmetrize(a * va);
  Eigen::FullPivLU<Matrix> lu(ava);
  require(lu.rank() == ava.rows() && lu.rcond() > 1e-15,
          ErrorCode::degenerate_constraint, "A V A' is singular");
  return symmetrize(v - va * lu.solve(va.transpose()));
}

namespace detail {

inline Matrix base_turnover_matrix(const LossSpec& spec, Eigen::Index k) {
  Matrix base = spec.turnover_diag.size() ? Matrix(spec.turnover_diag.asDiagonal())
                                          : Matrix::Identity(k, k);
  if (spec.constraint) base = project_evolution_covariance(base, spec.constraint->A);
  return base;
}

// Target and risk blocks shared by every emulator.
inline std::vector<ObservationBlock> common_blocks(const ForecastMoments& fm,
                                                   const LossSpec& spec, int t) {
  std::vector<ObservationBlock> blocks;
  const auto k = fm.dim();
  if (std::isfinite(spec.alpha[t]))
    blocks.push_back(ObservationBlock::scalar(fm.mean[t], spec.target[t], spec.alpha[t]));
  if (std::isfinite(spec.beta[t]))
    blocks.push_back(ObservationBlock::identity(Vector::Zero(k), spec.beta[t] * fm.precision[t]));
  return blocks;
}

inline SyntheticDLM empty_emulator(const ForecastMoments& fm, const LossSpec& spec) {
  SyntheticDLM model;
  model.initial_state = spec.w0;
  model.observations.reserve(fm.horizon());
  for (int t = 0; t < fm.horizon(); ++t) model.observations.push_back(common_blocks(fm, spec, t));
  model.evolution.assign(fm.horizon(), std::nullopt);
  model.state_constraint = spec.constraint;
  return model;
}

inline void require_compatible(const ForecastMoments& fm, const LossSpec& spec) {
  fm.validate();
  require(spec.horizon() == fm.horizon(), ErrorCode::shape_error,
          "loss horizon differs from forecast horizon");
  spec.validate(fm.dim());
}

// Quadratic emulator with evolution lambda_t * W_t; used directly for the
// normal family and as the initializer for the Laplace families (where an
// infinite lambda becomes a diffuse step).
inline SyntheticDLM quadratic_emulator(const ForecastMoments& fm, const LossSpec& spec) {
  SyntheticDLM model = empty_emulator(fm, spec);
  const Matrix base = base_turnover_matrix(spec, fm.dim());
  for (int t = 0; t < fm.horizon(); ++t)
    if (std::isfinite(spec.lambda[t])) model.evolution[t] = spec.lambda[t] * base;
  return model;
}

}  // namespace detail

/// Synthetic DLM whose posterior mode minimizes the normal loss.
inline SyntheticDLM build_normal_emulator(const ForecastMoments& fm, const LossSpec& spec) {
  detail::require_compatible(fm, spec);
  require(spec.family == LossFamily::normal, ErrorCode::invalid_spec,
          "build_normal_emulator needs a normal-family loss");
  return detail::quadratic_emulator(fm, spec);
}

struct LossBreakdown {
  double target = 0.0;
  double risk = 0.0;
  double turnover = 0.0;
  double weight = 0.0;
  double total() const { return target + risk + turnover + weight; }
};

/// Term-by-term evaluation of the selected loss at a candidate path w_{1:h}.
inline LossBreakdown loss_terms(const Path& path, const ForecastMoments& fm,
                                const LossSpec& spec) {
  const int h = fm.horizon();
  const auto k = fm.dim();
  require(static_cast<int>(path.size()) == h, ErrorCode::shape_error, "path length");
  for (const auto& w : path)
    require(w.size() == k, ErrorCode::shape_error, "path state dimension");
  LossBreakdown out;
  Matrix turnover_pinv;
  if (spec.family == LossFamily::normal)
    turnover_pinv = sym_pseudo_inverse(detail::base_turnover_matrix(spec, k));
  for (int t = 0; t < h; ++t) {
    const Vector& w = path[t];
    const Vector& prev = t == 0 ? spec.w0 : path[t - 1];
    const Vector dw = w - prev;
    const double res = spec.target[t] - fm.mean[t].dot(w);
    if (spec.alpha[t] == 0.0) {
      if (std::abs(res) > 1e-8) out.target = kInf;
    } else if (std::isfinite(spec.alpha[t])) {
      out.target += res * res / spec.alpha[t];
    }
    if (std::isfinite(spec.beta[t])) {
      const Eigen::LLT<Matrix> llt(fm.precision[t]);
      const Vector half = llt.matrixL().solve(w);
      out.risk += half.squaredNorm() / spec.beta[t];
    }
    if (std::isfinite(spec.lambda[t])) {
      out.turnover += spec.family == LossFamily::normal
                          ? dw.dot(turnover_pinv * dw) / spec.lambda[t]
                          : 2.0 * dw.lpNorm<1>() / spec.lambda[t];
    }
    if (spec.family == LossFamily::extended_laplace && std::isfinite(spec.gamma[t]))
      out.weight += 2.0 * w.lpNorm<1>() / spec.gamma[t];
  }
  return out;
}

inline double eval_loss(const Path& path, const ForecastMoments& fm, const LossSpec& spec) {
  return loss_terms(path, fm, spec).total();
}

struct NormalSolution {
  Path path;
  SmoothedPath smoothed;  // s_t, S_t: exact marginal moments of each w_t
  FilterMoments filter;
};

inline NormalSolution solve_emulator(const SyntheticDLM& model) {
  NormalSolution out;
  out.filter = forward_filter(model);
  out.smoothed = backward_smooth(out.filter, model);
  out.path = out.smoothed.mean;
  return out;
}

/// Optimal path under the normal loss; path[0] is the decision w_1.
inline NormalSolution solve_normal_multistep(const ForecastMoments& fm, const LossSpec& spec) {
  return solve_emulator(build_normal_emulator(fm, spec));
}

}  // namespace emuport

#pragma once

// Profiled-loss optimization for the Laplace and extended Laplace losses.
//
// Each absolute-value term is a normal scale mixture, so conditional on the
// latent scales the emulator is a normal DLM and FFBS returns its exact mode.
// EM alternates closing the scales (E-step) with that mode (M-step); this is
// a majorize-minimize scheme, so the loss is non-increasing.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "emuport/loss.hpp"

namespace emuport {

struct EmConfig {
  int max_iters = 500;
  double tol = 1e-8;  // on max |w^{(s+1)} - w^{(s)}| over the path
  double scale_floor = 1e-12;
  double zero_report_threshold = 1e-6;
  // tau = lambda^2 |dw| (and phi = gamma^2 |w|) instead of lambda |dw|.
  bool squared_weight_estep = false;
  bool record_iterates = false;

  void validate() const {
    require(max_iters >= 1, ErrorCode::invalid_spec, "EM max_iters must be >= 1");
    require(tol > 0.0 && scale_floor > 0.0 && zero_report_threshold >= 0.0,
            ErrorCode::invalid_spec, "EM tolerances must be positive");
  }
};

/// tau(t, j) turnover scales (W_t = diag(tau_t)); phi(t, j) weight scales.
struct LatentScales {
  Matrix tau;
  std::optional<Matrix> phi;
};

enum class ScaleKind { turnover, weights };

/// Closed-form E-step: E[1/tau | w] = 1/(lambda |dw|) for the GIG full
/// conditional, so the conditional emulator uses tau = lambda |dw|.
inline Matrix estep_scales(const Path& path, const LossSpec& spec, ScaleKind which,
                           const EmConfig& cfg = {}) {
  const int h = static_cast<int>(path.size());
  require(h == spec.horizon(), ErrorCode::shape_error, "path length differs from loss horizon");
  const auto k = spec.w0.size();
  Matrix out(h, k);
  for (int t = 0; t < h; ++t) {
    const double weight = which == ScaleKind::turnover ? spec.lambda[t] : spec.gamma[t];
    const double mult = cfg.squared_weight_estep ? weight * weight : weight;
    const Vector& prev = t == 0 ? spec.w0 : path[t - 1];
    for (Eigen::Index j = 0; j < k; ++j) {
      const double x = which == ScaleKind::turnover ? path[t](j) - prev(j) : path[t](j);
      const double s = std::isfinite(mult) ? mult * std::abs(x) : kInf;
      out(t, j) = std::max(s, cfg.scale_floor);
    }
  }
  return out;
}

/// Conditionally normal emulator given the latent scales. Infinite lambda_t
/// gives a diffuse step; infinite gamma_t drops the weight block.
inline SyntheticDLM build_laplace_emulator(const ForecastMoments& fm, const LossSpec& spec,
                                           const LatentScales& scales,
                                           double scale_floor = 1e-12,
                                           bool* refloored = nullptr) {
  SyntheticDLM model = detail::empty_emulator(fm, spec);
  const auto k = fm.dim();
  for (int t = 0; t < fm.horizon(); ++t) {
    if (spec.family == LossFamily::extended_laplace && scales.phi &&
        std::isfinite(spec.gamma[t])) {
      model.observations[t].push_back(ObservationBlock::identity(
          Vector::Zero(k), Matrix(scales.phi->row(t).transpose().asDiagonal())));
    }
    if (!std::isfinite(spec.lambda[t])) continue;
    Vector tau = scales.tau.row(t).transpose();
    if (!spec.constraint) {
      model.evolution[t] = Matrix(tau.asDiagonal());
      continue;
    }
    double floor = scale_floor;
    for (int attempt = 0;; ++attempt) {
      try {
        model.evolution[t] =
            project_evolution_covariance(Matrix(tau.asDiagonal()), spec.constraint->A);
        break;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::degenerate_constraint || attempt >= 8) throw;
        floor *= 1e3;
        tau = tau.cwiseMax(floor);
        if (refloored) *refloored = true;
      }
    }
  }
  return model;
}

struct EmResult {
  Path path;                       // final w_{1:h}; path[0] is the decision
  std::vector<double> loss_trace;  // loss at the initial path, then per iterate
  LatentScales scales;
  std::vector<Path> iterates;      // filled when EmConfig::record_iterates
  int iterations = 0;
  bool converged = false;
  bool refloored = false;
};

/// Starting path: the quadratic-loss solution with the same weights, or the
/// constant path at w0 when that fails.
inline Path em_initial_path(const ForecastMoments& fm, const LossSpec& spec) {
  try {
    LossSpec quad = spec;
    quad.family = LossFamily::normal;
    return solve_emulator(detail::quadratic_emulator(fm, quad)).path;
  } catch (const Error&) {
    return Path(fm.horizon(), spec.w0);
  }
}

inline EmResult em_solve(const ForecastMoments& fm, const LossSpec& spec,
                         const EmConfig& cfg = {}) {
  detail::require_compatible(fm, spec);
  cfg.validate();
  require(spec.family != LossFamily::normal, ErrorCode::invalid_spec,
          "em_solve needs a laplace or extended_laplace loss");
  const bool extended = spec.family == LossFamily::extended_laplace;

  EmResult out;
  out.path = em_initial_path(fm, spec);
  out.loss_trace.push_back(eval_loss(out.path, fm, spec));
  if (cfg.record_iterates) out.iterates.push_back(out.path);

  for (int s = 1; s <= cfg.max_iters; ++s) {
    out.scales.tau = estep_scales(out.path, spec, ScaleKind::turnover, cfg);
    if (extended) out.scales.phi = estep_scales(out.path, spec, ScaleKind::weights, cfg);
    const SyntheticDLM model =
        build_laplace_emulator(fm, spec, out.scales, cfg.scale_floor, &out.refloored);
    Path next = solve_emulator(model).path;
    double change = 0.0;
    for (int t = 0; t < fm.horizon(); ++t)
      change = std::max(change, (next[t] - out.path[t]).cwiseAbs().maxCoeff());
    out.path = std::move(next);
    out.loss_trace.push_back(eval_loss(out.path, fm, spec));
    if (cfg.record_iterates) out.iterates.push_back(out.path);
    out.iterations = s;
    if (change < cfg.tol) {
      out.converged = true;
      break;
    }
  }
  return out;
}

struct SparsityReport {
  std::vector<std::vector<bool>> zero_weight;    // [t][j]
  std::vector<std::vector<bool>> zero_turnover;  // [t][j]
  std::vector<int> nonzero_weights;              // per t
  std::vector<int> changed_weights;              // per t
};

/// Flags |w_jt| < threshold and |w_jt - w_j,t-1| < threshold (exact zeros
/// always count).
inline SparsityReport report_sparsity(const Path& path, const Vector& w0, double threshold) {
  SparsityReport out;
  const auto flag = [threshold](double x) { return x == 0.0 || std::abs(x) < threshold; };
  for (std::size_t t = 0; t < path.size(); ++t) {
    const Vector& prev = t == 0 ? w0 : path[t - 1];
    require(path[t].size() == prev.size(), ErrorCode::shape_error, "sparsity path dimension");
    std::vector<bool> zw, zt;
    int nz = 0, nc = 0;
    for (Eigen::Index j = 0; j < path[t].size(); ++j) {
      zw.push_back(flag(path[t](j)));
      zt.push_back(flag(path[t](j) - prev(j)));
      nz += zw.back() ? 0 : 1;
      nc += zt.back() ? 0 : 1;
    }
    out.zero_weight.push_back(std::move(zw));
    out.zero_turnover.push_back(std::move(zt));
    out.nonzero_weights.push_back(nz);
    out.changed_weights.push_back(nc);
  }
  return out;
}

}  // namespace emuport

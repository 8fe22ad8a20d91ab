#pragma once

// Sequential investment harness: each day the forecaster is updated, h-step
// return moments are simulated, every configured strategy chooses its next
// portfolio from its own current holdings, and realized growth, turnover and
// risk are recorded.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "emuport/baselines.hpp"
#include "emuport/ddnm.hpp"
#include "emuport/laplace_em.hpp"
#include "emuport/mcmc.hpp"

namespace emuport {

enum class StrategyKind { markowitz, normal, laplace_profiled, laplace_marginal, extended_laplace };

constexpr std::string_view to_string(StrategyKind s) noexcept {
  switch (s) {
    case StrategyKind::markowitz: return "markowitz";
    case StrategyKind::normal: return "normal";
    case StrategyKind::laplace_profiled: return "laplace_profiled";
    case StrategyKind::laplace_marginal: return "laplace_marginal";
    case StrategyKind::extended_laplace: return "extended_laplace";
  }
  return "markowitz";
}

inline StrategyKind parse_strategy(std::string_view s) {
  for (auto k : {StrategyKind::markowitz, StrategyKind::normal, StrategyKind::laplace_profiled,
                 StrategyKind::laplace_marginal, StrategyKind::extended_laplace})
    if (s == to_string(k)) return k;
  fail(ErrorCode::config_error, "unknown strategy '" + std::string(s) + "'");
}

/// One portfolio rule with constant loss weights over the horizon.
struct StrategySpec {
  StrategyKind kind = StrategyKind::normal;
  std::string label;  // defaults to the kind name
  double alpha = 1.0;
  double beta = 100.0;
  double lambda = 100.0;
  double gamma = kInf;  // extended_laplace only

  static StrategySpec of(StrategyKind kind) {
    StrategySpec s;
    s.kind = kind;
    return s;
  }

  std::string name() const { return label.empty() ? std::string(to_string(kind)) : label; }

  void validate() const {
    const auto who = "strategy " + name() + ": ";
    require(alpha >= 0.0 && !std::isnan(alpha), ErrorCode::config_error, who + "alpha must be >= 0");
    require(beta > 0.0, ErrorCode::config_error, who + "beta must be > 0");
    require(lambda > 0.0, ErrorCode::config_error, who + "lambda must be > 0");
    require(gamma > 0.0, ErrorCode::config_error, who + "gamma must be > 0");
    require(kind != StrategyKind::normal || std::isfinite(lambda), ErrorCode::config_error,
            "strategy " + name() + ": normal loss needs finite lambda");
    require(kind != StrategyKind::extended_laplace || std::isfinite(gamma),
            ErrorCode::config_error, "strategy " + name() + ": extended_laplace needs finite gamma");
  }
};

struct BacktestConfig {
  int horizon = 5;
  double target = 0.0005;  // m_t
  std::vector<StrategySpec> strategies{StrategySpec::of(StrategyKind::markowitz),
                                       StrategySpec::of(StrategyKind::normal)};
  std::vector<double> costs{0.0, 0.001};
  int training_days = 500;
  double parent_threshold = 0.2;
  int max_days = -1;  // investment days to run; -1 runs to the end of the data
  std::uint64_t seed = 0;
  int threads = 1;
  EmConfig em;
  McmcConfig mcmc;
  int mcmc_chains = 1;  // independent chains pooled per marginal decision
  ModeSearchConfig mode_search;
  double sparsity_threshold = 1e-6;
  bool keep_moments = false;  // retain each day's forecast moments in the result

  void validate() const {
    require(horizon >= 1, ErrorCode::config_error, "horizon must be >= 1");
    require(std::isfinite(target), ErrorCode::config_error, "target must be finite");
    require(!strategies.empty(), ErrorCode::config_error, "at least one strategy is needed");
    for (std::size_t i = 0; i < strategies.size(); ++i) {
      strategies[i].validate();
      for (std::size_t j = 0; j < i; ++j)
        require(strategies[i].name() != strategies[j].name(), ErrorCode::config_error,
                "duplicate strategy label " + strategies[i].name());
    }
    require(!costs.empty(), ErrorCode::config_error, "at least one transaction cost is needed");
    for (double d : costs)
      require(d >= 0.0 && std::isfinite(d), ErrorCode::config_error, "costs must be >= 0");
    require(training_days >= kDdnmLags + 1, ErrorCode::config_error, "training_days too small");
    require(parent_threshold >= 0.0, ErrorCode::config_error, "parent_threshold must be >= 0");
    require(max_days == -1 || max_days >= 0, ErrorCode::config_error, "max_days must be >= -1");
    require(threads >= 1, ErrorCode::config_error, "threads must be >= 1");
    em.validate();
    mcmc.validate();
    require(mcmc_chains >= 1, ErrorCode::config_error, "mcmc chains must be >= 1");
    mode_search.validate();
  }
};

/// One strategy on one day. The portfolio w is held from time + 1 to
/// time + 2 in price-row units, so realized growth uses that day's return.
struct BacktestRecord {
  int day = 0;   // investment-day index, 0-based
  int time = 0;  // price row at which the decision is made
  std::size_t strategy = 0;
  Vector w;
  Vector w_prev;
  double growth = 1.0;    // (r + 1)'w
  double turnover = 0.0;  // 1'|w - w_prev|
  double sd = 0.0;        // (w' K^{-1} w)^{1/2} at the first forecast step
  double bound = 0.0;     // minimum-variance sd at the same step
  int nonzero = 0;        // |w_j| above the sparsity threshold
  int changed = 0;        // |w_j - w_prev,j| above the sparsity threshold
  std::vector<double> cumulative;  // R_t per configured cost
  std::vector<bool> ruin;          // factor <= 0 so far, per cost
  bool failed = false;
  std::string failure;
};

struct BacktestResult {
  std::vector<std::string> strategy_names;
  std::vector<double> costs;
  std::vector<std::vector<int>> parents;
  std::vector<BacktestRecord> records;  // day-major, strategies in config order
  std::vector<ForecastMoments> moments;  // per day when BacktestConfig::keep_moments
  int days = 0;
  int failures = 0;

  std::vector<const BacktestRecord*> strategy_records(std::size_t s) const {
    std::vector<const BacktestRecord*> out;
    for (const auto& r : records)
      if (r.strategy == s) out.push_back(&r);
    return out;
  }
};

/// Per-period factor (r + 1)'w - delta * turnover.
inline double period_factor(double growth, double turnover, double delta) {
  return growth - delta * turnover;
}

/// R_t = -1 + prod_{s <= t} factor_s for records of one strategy in day order.
inline std::vector<double> cumulative_returns(const std::vector<const BacktestRecord*>& records,
                                              double delta) {
  std::vector<double> out;
  out.reserve(records.size());
  double prod = 1.0;
  for (const auto* r : records) {
    prod *= period_factor(r->growth, r->turnover, delta);
    out.push_back(prod - 1.0);
  }
  return out;
}

inline std::vector<double> cumulative_returns(const std::vector<BacktestRecord>& records,
                                              double delta) {
  std::vector<const BacktestRecord*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  return cumulative_returns(ptrs, delta);
}

/// Whether some factor up to each record was <= 0.
inline std::vector<bool> ruin_flags(const std::vector<const BacktestRecord*>& records,
                                    double delta) {
  std::vector<bool> out;
  bool ruined = false;
  for (const auto* r : records) {
    ruined = ruined || period_factor(r->growth, r->turnover, delta) <= 0.0;
    out.push_back(ruined);
  }
  return out;
}

struct SdSeries {
  std::vector<double> sd;
  std::vector<double> bound;
};

inline SdSeries realized_sd_series(const std::vector<const BacktestRecord*>& records) {
  SdSeries out;
  for (const auto* r : records) {
    out.sd.push_back(r->sd);
    out.bound.push_back(r->bound);
  }
  return out;
}

/// (w' K^{-1} w)^{1/2} for return precision K.
inline double portfolio_sd(const Matrix& precision, const Vector& w) {
  return std::sqrt(detail::quad_cov(precision, w));
}

inline LossSpec strategy_loss(const StrategySpec& s, int h, double target, const Vector& w0) {
  LossFamily family = LossFamily::normal;
  double gamma = kInf;
  if (s.kind == StrategyKind::laplace_profiled || s.kind == StrategyKind::laplace_marginal)
    family = LossFamily::laplace;
  if (s.kind == StrategyKind::extended_laplace) {
    family = LossFamily::extended_laplace;
    gamma = s.gamma;
  }
  return LossSpec::constant(family, h, w0, s.alpha, s.beta, s.lambda, gamma, target,
                            LinearConstraint::sum_to_one(w0.size()));
}

/// Next portfolio for one strategy given the day's moments and holdings w0.
inline Vector solve_strategy(const StrategySpec& s, const ForecastMoments& fm, double target,
                             const Vector& w0, const BacktestConfig& cfg, std::uint64_t seed) {
  if (s.kind == StrategyKind::markowitz)
    return markowitz_myopic(fm.mean[0], fm.precision[0], target).w;
  const LossSpec spec = strategy_loss(s, fm.horizon(), target, w0);
  switch (s.kind) {
    case StrategyKind::normal: return solve_normal_multistep(fm, spec).path[0];
    case StrategyKind::laplace_profiled:
    case StrategyKind::extended_laplace: return em_solve(fm, spec, cfg.em).path[0];
    case StrategyKind::laplace_marginal: {
      McmcConfig mc = cfg.mcmc;
      mc.seed = seed;
      return solve_marginal(fm, spec, mc, cfg.mode_search, cfg.mcmc_chains).w1;
    }
    case StrategyKind::markowitz: break;
  }
  return w0;
}

/// Strategy solver: (strategy, moments, holdings, seed) -> next portfolio.
using StrategySolver = std::function<Vector(const StrategySpec&, const ForecastMoments&,
                                            const Vector&, std::uint64_t)>;

/// Starting holdings: myopic Markowitz, else the minimum-variance portfolio
/// when the target cannot be met.
inline Vector initial_portfolio(const ForecastMoments& fm, double target) {
  try {
    const Vector w = markowitz_myopic(fm.mean[0], fm.precision[0], target).w;
    if (w.allFinite()) return w;
  } catch (const Error&) {
  }
  return min_variance_bound(fm.precision[0]).w;
}

/// Runs the rolling protocol over a table of positive prices (rows are days,
/// columns are assets). The first training_days rows fit the forecaster (and
/// choose parents when spec.parents is empty); decisions start at the last
/// training row. Every strategy sees the same simulated moments each day,
/// seeded by derive_seed(seed, day).
inline BacktestResult run_backtest(const Matrix& prices, DdnmSpec spec, const BacktestConfig& cfg,
                                   const StrategySolver& solver = {}) {
  cfg.validate();
  const StrategySolver solve = solver ? solver
                                      : StrategySolver([&cfg](const StrategySpec& s,
                                                              const ForecastMoments& fm,
                                                              const Vector& w0, std::uint64_t seed) {
                                          return solve_strategy(s, fm, cfg.target, w0, cfg, seed);
                                        });
  const int k = static_cast<int>(prices.cols());
  const int rows = static_cast<int>(prices.rows());
  require(k >= 1, ErrorCode::shape_error, "price table has no assets");
  require(prices.allFinite() && (prices.array() > 0.0).all(), ErrorCode::invalid_price,
          "prices must be finite and positive");
  require(rows >= cfg.training_days + 1, ErrorCode::insufficient_data,
          "need at least one price row after the training window");
  const Matrix y = prices.array().log().matrix();
  const Matrix training = y.topRows(cfg.training_days);
  if (spec.parents.empty()) {
    spec.parents = select_parents(training, cfg.parent_threshold, spec);
  } else {
    require(spec.series() == k, ErrorCode::config_error, "parent table does not match assets");
  }
  spec.validate();

  BacktestResult out;
  for (const auto& s : cfg.strategies) out.strategy_names.push_back(s.name());
  out.costs = cfg.costs;
  out.parents = spec.parents;

  DdnmState state = ddnm_filter(spec, training);
  const std::size_t n_strat = cfg.strategies.size();
  std::vector<Vector> holdings(n_strat);
  std::vector<std::vector<double>> prod(n_strat, std::vector<double>(cfg.costs.size(), 1.0));
  std::vector<std::vector<bool>> ruined(n_strat, std::vector<bool>(cfg.costs.size(), false));

  int days = rows - cfg.training_days;
  if (cfg.max_days >= 0) days = std::min(days, cfg.max_days);
  for (int day = 0; day < days; ++day) {
    const int t = cfg.training_days - 1 + day;
    const auto paths = simulate_forecast_paths(state, spec, cfg.horizon, spec.paths,
                                               derive_seed(cfg.seed, static_cast<std::uint64_t>(day)),
                                               cfg.threads);
    const ForecastMoments fm = paths_to_return_moments(paths);
    if (day == 0) {
      const Vector w0 = initial_portfolio(fm, cfg.target);
      for (auto& h : holdings) h = w0;
    }
    const Vector growth_vec = (prices.row(t + 1).array() / prices.row(t).array()).matrix().transpose();
    const auto bound = min_variance_bound(fm.precision[0]);

    for (std::size_t si = 0; si < n_strat; ++si) {
      BacktestRecord rec;
      rec.day = day;
      rec.time = t;
      rec.strategy = si;
      rec.w_prev = holdings[si];
      try {
        rec.w = solve(cfg.strategies[si], fm, holdings[si],
                      derive_seed(cfg.seed, static_cast<std::uint64_t>(day), si + 1));
        require(rec.w.allFinite(), ErrorCode::degenerate_forecast, "non-finite portfolio");
      } catch (const Error& e) {
        rec.w = holdings[si];
        rec.failed = true;
        rec.failure = e.what();
        ++out.failures;
      }
      rec.growth = growth_vec.dot(rec.w);
      rec.turnover = (rec.w - rec.w_prev).cwiseAbs().sum();
      rec.sd = portfolio_sd(fm.precision[0], rec.w);
      rec.bound = bound.sd;
      for (Eigen::Index j = 0; j < rec.w.size(); ++j) {
        rec.nonzero += std::abs(rec.w(j)) > cfg.sparsity_threshold ? 1 : 0;
        rec.changed += std::abs(rec.w(j) - rec.w_prev(j)) > cfg.sparsity_threshold ? 1 : 0;
      }
      for (std::size_t c = 0; c < cfg.costs.size(); ++c) {
        const double f = period_factor(rec.growth, rec.turnover, cfg.costs[c]);
        prod[si][c] *= f;
        if (f <= 0.0) ruined[si][c] = true;
        rec.cumulative.push_back(prod[si][c] - 1.0);
        rec.ruin.push_back(ruined[si][c]);
      }
      holdings[si] = rec.w;
      out.records.push_back(std::move(rec));
    }
    if (cfg.keep_moments) out.moments.push_back(fm);
    ddnm_update(state, spec, y.row(t + 1).transpose());
  }
  out.days = days;
  return out;
}

/// Seeded synthetic log-price market for harness tests: log prices follow
/// y_t = y_{t-1} + mu + e_t with persistent per-asset drifts mu and
/// innovations where each asset after the first loads on the previous one.
struct SyntheticMarket {
  int k = 3;
  int days = 800;
  double drift = 4e-4;         // mean of the per-asset drifts
  double drift_spread = 3e-4;  // sd of the per-asset drifts around that mean
  double vol = 0.01;           // daily innovation sd
  double coupling = 0.6;       // loading of asset j on asset j-1
  double start_price = 100.0;

  Matrix generate(std::uint64_t seed) const {
    require(k >= 1 && days >= 2 && vol >= 0.0 && start_price > 0.0, ErrorCode::invalid_spec,
            "synthetic market parameters");
    Rng rng(seed);
    Vector mu(k);
    for (int j = 0; j < k; ++j) mu(j) = drift + drift_spread * standard_normal(rng);
    Matrix p(days, k);
    Vector y = Vector::Constant(k, std::log(start_price));
    Vector e(k);
    for (int t = 0; t < days; ++t) {
      for (int j = 0; j < k; ++j) {
        e(j) = vol * standard_normal(rng);
        if (j > 0) e(j) += coupling * e(j - 1);
      }
      if (t > 0) y += mu + e;
      p.row(t) = y.array().exp().matrix().transpose();
    }
    return p;
  }
};

}  // namespace emuport

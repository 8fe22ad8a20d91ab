#pragma once

// Dynamic dependence network TV-VAR(2) forecaster on log prices.
//
// Series j follows y_jt = F_jt' theta_jt + N(0, v_jt) with regressors
// F_jt = (1, y_{t-1}', y_{t-2}', y_{pa(j),t}') and parents pa(j) among the
// earlier series. Given the parents, the multivariate filter splits into k
// univariate discount DLMs with conjugate gamma volatilities; multi-step
// forecasts are simulated path by path in series order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "emuport/loss.hpp"
#include "emuport/random.hpp"

namespace emuport {

inline constexpr int kDdnmLags = 2;

struct DdnmSpec {
  std::vector<std::vector<int>> parents;  // pa(j), 0-based, each entry < j
  double state_discount = 0.98;
  double vol_discount = 0.97;
  double prior_state_mean = 0.0;
  double prior_state_scale = 1.0;  // prior coefficient covariance scale * I
  double prior_vol_shape = 5.0;    // n_0; d_0 = n_0 * sample variance of diffs
  int paths = 50000;
  std::vector<std::string> names;   // optional series labels

  /// Full model pa(j) = {0, ..., j-1}.
  static DdnmSpec full(int k) {
    DdnmSpec s;
    s.parents.resize(k);
    for (int j = 0; j < k; ++j)
      for (int i = 0; i < j; ++i) s.parents[j].push_back(i);
    return s;
  }

  /// No contemporaneous parents.
  static DdnmSpec independent(int k) {
    DdnmSpec s;
    s.parents.resize(k);
    return s;
  }

  int series() const { return static_cast<int>(parents.size()); }

  void validate() const {
    const int k = series();
    require(k >= 1, ErrorCode::invalid_spec, "DDNM needs at least one series");
    for (int j = 0; j < k; ++j) {
      const auto& pa = parents[j];
      for (std::size_t a = 0; a < pa.size(); ++a) {
        require(pa[a] >= 0 && pa[a] < j, ErrorCode::invalid_spec,
                "parents of series " + std::to_string(j) + " must precede it");
        require(a == 0 || pa[a] > pa[a - 1], ErrorCode::invalid_spec,
                "parent lists must be strictly increasing");
      }
    }
    require(state_discount > 0.0 && state_discount <= 1.0 && vol_discount > 0.0 &&
                vol_discount <= 1.0,
            ErrorCode::invalid_spec, "discount factors must lie in (0, 1]");
    require(prior_state_scale > 0.0 && prior_vol_shape > 0.0, ErrorCode::invalid_spec,
            "DDNM prior scale and shape must be positive");
    require(paths >= 1, ErrorCode::invalid_spec, "DDNM path count must be >= 1");
    require(names.empty() || static_cast<int>(names.size()) == k, ErrorCode::invalid_spec,
            "DDNM names must match the series count");
  }
};

/// Posterior for one series: theta | v ~ N(m, C v / S) with S = d / n, and
/// 1/v ~ Gamma(n/2, rate d/2).
struct SeriesState {
  Vector m;
  Matrix C;
  double n = 0.0;
  double d = 0.0;
  std::vector<int> parents;

  double point_variance() const { return d / n; }
};

/// Location-scale Student-t one-step forecast.
struct OneStepForecast {
  double location = 0.0;
  double scale2 = 0.0;  // q
  double dof = 0.0;
  double variance() const { return dof > 2.0 ? scale2 * dof / (dof - 2.0) : kInf; }
};

inline Eigen::Index ddnm_state_dim(int k, std::size_t n_parents) {
  return 1 + kDdnmLags * k + static_cast<Eigen::Index>(n_parents);
}

/// F = (1, lag1, lag2, current[parents]).
inline Vector ddnm_regressors(const std::vector<int>& parents, const Vector& lag1,
                              const Vector& lag2, const Vector& current) {
  const auto k = lag1.size();
  Vector f(ddnm_state_dim(static_cast<int>(k), parents.size()));
  f(0) = 1.0;
  f.segment(1, k) = lag1;
  f.segment(1 + k, k) = lag2;
  for (std::size_t a = 0; a < parents.size(); ++a)
    f(1 + 2 * k + static_cast<Eigen::Index>(a)) = current(parents[a]);
  return f;
}

/// Prior for time t given the posterior at t-1: R = C / delta, n' = beta n,
/// d' = beta d, and the one-step t forecast with beta n degrees of freedom.
inline OneStepForecast forecast_series(const SeriesState& s, const Vector& f, double delta,
                                       double beta) {
  require(f.size() == s.m.size(), ErrorCode::shape_error, "DDNM regressor dimension");
  OneStepForecast out;
  out.location = f.dot(s.m);
  out.scale2 = f.dot(s.C * f) / delta + s.point_variance();
  out.dof = beta * s.n;
  return out;
}

/// Discounted conjugate update with one observation y at regressors f.
inline SeriesState update_series(const SeriesState& s, const Vector& f, double y, double delta,
                                 double beta) {
  require(f.size() == s.m.size(), ErrorCode::shape_error, "DDNM regressor dimension");
  require(std::isfinite(y), ErrorCode::invalid_price, "non-finite DDNM observation");
  const Matrix r = s.C / delta;
  const double n_prior = beta * s.n;
  const double d_prior = beta * s.d;
  const double sv = d_prior / n_prior;
  const Vector rf = r * f;
  const double q = f.dot(rf) + sv;
  const double e = y - f.dot(s.m);
  const Vector a = rf / q;
  SeriesState out;
  out.parents = s.parents;
  out.n = n_prior + 1.0;
  out.d = d_prior + sv * e * e / q;
  const double s_new = out.d / out.n;
  out.m = s.m + a * e;
  out.C = symmetrize((s_new / sv) * (r - a * a.transpose() * q));
  return out;
}

/// Filtered state of all series plus the two most recent observations.
struct DdnmState {
  std::vector<SeriesState> series;
  Vector lag1;  // y_t (the latest observation)
  Vector lag2;  // y_{t-1}
  int time = 0;  // number of observations absorbed, lags included

  int k() const { return static_cast<int>(series.size()); }
};

/// Priors from a history of log prices (rows are times). The volatility
/// prior uses the sample variance of first differences per series.
inline DdnmState ddnm_prior(const DdnmSpec& spec, const Matrix& history) {
  spec.validate();
  const int k = spec.series();
  require(history.cols() == k, ErrorCode::shape_error, "history columns differ from series");
  require(history.rows() >= kDdnmLags + 1, ErrorCode::insufficient_data,
          "DDNM needs at least three observations");
  require(history.allFinite(), ErrorCode::invalid_price, "non-finite log price");
  DdnmState st;
  const Matrix diff = history.bottomRows(history.rows() - 1) - history.topRows(history.rows() - 1);
  for (int j = 0; j < k; ++j) {
    const double mean = diff.col(j).mean();
    const double var = diff.rows() > 1 ? (diff.col(j).array() - mean).square().sum() /
                                             static_cast<double>(diff.rows() - 1)
                                       : 0.0;
    SeriesState s;
    s.parents = spec.parents[j];
    const auto p = ddnm_state_dim(k, s.parents.size());
    s.m = Vector::Constant(p, spec.prior_state_mean);
    s.C = spec.prior_state_scale * Matrix::Identity(p, p);
    s.n = spec.prior_vol_shape;
    s.d = spec.prior_vol_shape * std::max(var, 1e-12);
    st.series.push_back(std::move(s));
  }
  st.lag2 = history.row(0).transpose();
  st.lag1 = history.row(1).transpose();
  st.time = kDdnmLags;
  return st;
}

/// Absorbs one new observation vector y_t for every series.
inline void ddnm_update(DdnmState& st, const DdnmSpec& spec, const Vector& y) {
  require(y.size() == st.k(), ErrorCode::shape_error, "DDNM observation dimension");
  for (int j = 0; j < st.k(); ++j) {
    auto& s = st.series[j];
    const Vector f = ddnm_regressors(s.parents, st.lag1, st.lag2, y);
    s = update_series(s, f, y(j), spec.state_discount, spec.vol_discount);
  }
  st.lag2 = st.lag1;
  st.lag1 = y;
  ++st.time;
}

/// Prior from the whole history, then filtering through every row after the
/// two lag rows.
inline DdnmState ddnm_filter(const DdnmSpec& spec, const Matrix& history) {
  DdnmState st = ddnm_prior(spec, history);
  for (Eigen::Index t = kDdnmLags; t < history.rows(); ++t)
    ddnm_update(st, spec, history.row(t).transpose());
  return st;
}

inline constexpr int kMinParentTraining = 50;

/// Parental sets from a full-model run: pa(j) = {i < j : |E[gamma_ji]| > d}
/// at the end of training. The exploratory run keeps coefficients static
/// (state discount 1) by default; under 0.98 the posterior means average only
/// ~50 effective observations and independent series cross d = 0.2 often.
inline std::vector<std::vector<int>> select_parents(const Matrix& training, double d,
                                                    DdnmSpec base = {},
                                                    double training_discount = 1.0) {
  require(d >= 0.0, ErrorCode::invalid_parameter, "parent threshold must be >= 0");
  const int k = static_cast<int>(training.cols());
  require(k >= 1, ErrorCode::shape_error, "no series");
  require(training.rows() >= kDdnmLags + kMinParentTraining, ErrorCode::insufficient_data,
          "parent selection needs at least " + std::to_string(kMinParentTraining) +
              " observations beyond the lags");
  const auto full = DdnmSpec::full(k);
  base.parents = full.parents;
  base.names.clear();
  base.state_discount = training_discount;
  const DdnmState st = ddnm_filter(base, training);
  std::vector<std::vector<int>> out(k);
  for (int j = 0; j < k; ++j) {
    const auto& s = st.series[j];
    for (std::size_t a = 0; a < s.parents.size(); ++a) {
      const double g = s.m(1 + 2 * k + static_cast<Eigen::Index>(a));
      if (std::abs(g) > d) out[j].push_back(s.parents[a]);
    }
  }
  return out;
}

/// One line per series: "name: parent parent ..." (empty after the colon for
/// no parents).
inline std::string format_parents(const std::vector<std::vector<int>>& parents,
                                  const std::vector<std::string>& names) {
  require(names.size() == parents.size(), ErrorCode::shape_error, "parent table names");
  std::string out;
  for (std::size_t j = 0; j < parents.size(); ++j) {
    out += names[j] + ":";
    for (int p : parents[j]) out += " " + names[p];
    out += "\n";
  }
  return out;
}

inline std::vector<std::vector<int>> parse_parents(const std::string& text,
                                                   const std::vector<std::string>& names) {
  const auto index_of = [&](const std::string& n) {
    const auto it = std::find(names.begin(), names.end(), n);
    require(it != names.end(), ErrorCode::parse_error, "unknown series in parent table: " + n);
    return static_cast<int>(it - names.begin());
  };
  std::vector<std::vector<int>> out(names.size());
  std::vector<bool> seen(names.size(), false);
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto colon = line.find(':');
    require(colon != std::string::npos, ErrorCode::parse_error, "parent line without ':'");
    std::istringstream head(line.substr(0, colon));
    std::string name;
    head >> name;
    const int j = index_of(name);
    require(!seen[j], ErrorCode::parse_error, "series listed twice in parent table: " + name);
    seen[j] = true;
    std::istringstream rest(line.substr(colon + 1));
    std::string p;
    while (rest >> p) out[j].push_back(index_of(p));
    std::sort(out[j].begin(), out[j].end());
  }
  for (std::size_t j = 0; j < names.size(); ++j)
    require(seen[j], ErrorCode::parse_error, "parent table misses series " + names[j]);
  return out;
}

/// Simulated future log prices, y(n, i, j) for path n, step i = 1..h, series j.
struct SimulatedPaths {
  int n_paths = 0;
  int horizon = 0;
  int k = 0;
  std::vector<double> y;
  Vector y0;  // log prices at the forecast origin
  std::uint64_t seed = 0;
  int source_time = 0;

  double at(int n, int i, int j) const {
    return y[(static_cast<std::size_t>(n) * horizon + i) * k + j];
  }
  double& at(int n, int i, int j) {
    return y[(static_cast<std::size_t>(n) * horizon + i) * k + j];
  }
};

namespace detail {

inline constexpr int kPathBlock = 512;

// Per-series pieces reused by every path.
struct SeriesSampler {
  Matrix chol;  // lower Cholesky factor of C
  double s = 1.0;
};

inline double gamma_draw(double shape, double rate, Rng& rng) {
  return std::gamma_distribution<double>(shape, 1.0 / rate)(rng);
}

}  // namespace detail

/// Direct simulation of h-step paths. theta evolves as a random walk with the
/// discount evolution variance C (1 - delta) / delta, the precision 1/v by
/// gamma-beta steps phi' = phi eta / beta with eta ~ Beta(beta n/2, (1-beta) n/2).
/// Paths are generated in blocks of 512 with seed derive_seed(seed, origin,
/// block), so the output does not depend on the thread count.
inline SimulatedPaths simulate_forecast_paths(const DdnmState& st, const DdnmSpec& spec, int h,
                                              int n_paths, std::uint64_t seed,
                                              int threads = 1) {
  require(h >= 1 && n_paths >= 1, ErrorCode::invalid_spec, "simulation needs h, N >= 1");
  const int k = st.k();
  SimulatedPaths out;
  out.n_paths = n_paths;
  out.horizon = h;
  out.k = k;
  out.y.assign(static_cast<std::size_t>(n_paths) * h * k, 0.0);
  out.y0 = st.lag1;
  out.seed = seed;
  out.source_time = st.time;

  std::vector<detail::SeriesSampler> samplers(k);
  for (int j = 0; j < k; ++j) {
    const auto& s = st.series[j];
    Eigen::LLT<Matrix> llt(symmetrize(s.C));
    if (llt.info() == Eigen::Success) {
      samplers[j].chol = llt.matrixL();
    } else {
      const SymmetricEigen eig(s.C);
      // B B' = C with B = V sqrt(L); B' = QR gives the triangular factor R'
      const Matrix b = eig.vectors * eig.values.cwiseMax(0.0).cwiseSqrt().asDiagonal();
      const Eigen::HouseholderQR<Matrix> qr(b.transpose());
      samplers[j].chol = qr.matrixQR().triangularView<Eigen::Upper>().toDenseMatrix().transpose();
    }
    samplers[j].s = s.point_variance();
  }
  const double delta = spec.state_discount;
  const double beta = spec.vol_discount;
  const double first = 1.0 / std::sqrt(delta);
  const double later = std::sqrt((1.0 - delta) / delta);

  const int blocks = (n_paths + detail::kPathBlock - 1) / detail::kPathBlock;
  const auto run_block = [&](int b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(st.time), static_cast<std::uint64_t>(b)));
    std::normal_distribution<double> normal;
    std::vector<Vector> theta(k), z(k), step(k);
    for (int j = 0; j < k; ++j) {
      z[j].resize(st.series[j].m.size());
      step[j].resize(st.series[j].m.size());
    }
    std::vector<double> phi(k), shape(k);
    Vector lag1(k), lag2(k), cur(k);
    const int end = std::min(n_paths, (b + 1) * detail::kPathBlock);
    for (int n = b * detail::kPathBlock; n < end; ++n) {
      for (int j = 0; j < k; ++j) {
        const auto& s = st.series[j];
        phi[j] = detail::gamma_draw(0.5 * s.n, 0.5 * s.d, rng);
        shape[j] = s.n;
        theta[j] = s.m;
      }
      lag1 = st.lag1;
      lag2 = st.lag2;
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < k; ++j) {
          const auto& p = samplers[j];
          const auto& pa = st.series[j].parents;
          // gamma-beta volatility step
          const double g1 = detail::gamma_draw(0.5 * beta * shape[j], 1.0, rng);
          const double g2 = 1.0 - beta > 0.0
                                ? detail::gamma_draw(0.5 * (1.0 - beta) * shape[j], 1.0, rng)
                                : 0.0;
          phi[j] *= (g1 / (g1 + g2)) / beta;
          shape[j] *= beta;
          const double v = 1.0 / phi[j];
          Vector& zj = z[j];
          for (Eigen::Index r = 0; r < zj.size(); ++r) zj(r) = normal(rng);
          step[j].noalias() = p.chol.triangularView<Eigen::Lower>() * zj;
          theta[j] += ((i == 0 ? first : later) * std::sqrt(v / p.s)) * step[j];
          // F' theta with F = (1, lag1, lag2, cur[parents])
          const Vector& th = theta[j];
          double mean = th(0) + th.segment(1, k).dot(lag1) + th.segment(1 + k, k).dot(lag2);
          for (std::size_t a = 0; a < pa.size(); ++a)
            mean += th(1 + 2 * k + static_cast<Eigen::Index>(a)) * cur(pa[a]);
          cur(j) = mean + std::sqrt(v) * normal(rng);
          out.at(n, i, j) = cur(j);
        }
        lag2.swap(lag1);
        lag1 = cur;
      }
    }
  };
  const int workers = std::clamp(threads, 1, blocks);
  if (workers == 1) {
    for (int b = 0; b < blocks; ++b) run_block(b);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (int b = w; b < blocks; b += workers) run_block(b);
      });
    for (auto& t : pool) t.join();
  }
  for (double x : out.y)
    require(std::isfinite(x), ErrorCode::degenerate_forecast, "non-finite simulated log price");
  return out;
}

inline constexpr double kForecastRidge = 1e-8;

/// Per-step simple returns r_i = exp(y_i - y_{i-1}) - 1 along each path, then
/// MC means and inverse MC covariances with ridge eps * trace / k (eps alone
/// when the trace is zero).
inline ForecastMoments paths_to_return_moments(const SimulatedPaths& paths,
                                               double ridge = kForecastRidge) {
  const int k = paths.k;
  require(paths.n_paths >= k + 2, ErrorCode::insufficient_data,
          "return moments need at least k + 2 paths");
  ForecastMoments fm;
  const double nn = static_cast<double>(paths.n_paths);
  Matrix r(paths.n_paths, k);
  for (int i = 0; i < paths.horizon; ++i) {
    for (int n = 0; n < paths.n_paths; ++n)
      for (int j = 0; j < k; ++j) {
        const double prev = i == 0 ? paths.y0(j) : paths.at(n, i - 1, j);
        r(n, j) = std::expm1(paths.at(n, i, j) - prev);
      }
    const Vector mean = r.colwise().sum().transpose() / nn;
    const Matrix centred = r.rowwise() - mean.transpose();
    Matrix cov = symmetrize(centred.transpose() * centred / (nn - 1.0));
    const double tr = cov.trace() / k;
    cov.diagonal().array() += ridge * (tr > 0.0 ? tr : 1.0);
    Eigen::LLT<Matrix> llt(cov);
    require(llt.info() == Eigen::Success && cov.allFinite(), ErrorCode::degenerate_forecast,
            "return covariance is singular after the ridge at step " + std::to_string(i + 1));
    fm.mean.push_back(mean);
    fm.precision.push_back(symmetrize(llt.solve(Matrix::Identity(k, k))));
  }
  return fm;
}

}  // namespace emuport

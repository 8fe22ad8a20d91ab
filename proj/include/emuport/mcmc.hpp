#pragma once

// Marginal-loss optimization for the Laplace loss. A Gibbs sampler
// alternates the latent turnover scales tau_{1:h} with FFBS path draws; the
// conditional margins p(w_1 | tau) it visits form an equal-weight normal
// mixture approximating p(w_1), whose mode is found by fixed-point search.
//
// Under linear constraints the scale conditional picks up the factor
// det(A D_t A')^{1/2} (D_t = diag(tau_t)), handled by an independence
// Metropolis-Hastings step that proposes from the unconstrained GIG.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "emuport/laplace_em.hpp"
#include "emuport/mixture.hpp"
#include "emuport/random.hpp"

namespace emuport {

/// Exact draw from GIG(1/2, a, b), density proportional to
/// x^{-1/2} exp(-(a x + b / x) / 2). The reciprocal is inverse Gaussian with
/// mean sqrt(a/b) and shape a, drawn by the transformation-with-multiple-roots
/// method in a cancellation-free form.
inline double sample_gig_half(double a, double b, Rng& rng) {
  require(a > 0.0 && b > 0.0 && std::isfinite(a) && std::isfinite(b),
          ErrorCode::invalid_parameter, "GIG parameters must be positive and finite");
  const double phi = std::sqrt(a * b);
  const double mu = std::sqrt(a / b);
  const double nu = standard_normal(rng);
  const double y = nu * nu;
  const double x = 2.0 * a / (2.0 * phi + y + std::sqrt(y * y + 4.0 * y * phi));
  const double u = uniform01(rng);
  // inverse-Gaussian draw is x with probability mu / (mu + x), else mu^2 / x
  return u * x <= mu * (1.0 - u) ? 1.0 / x : x * b / a;
}

/// Independence-chain MH step for sum-to-one constraints: accept with
/// probability min(1, sqrt((c + 1'tau_new) / (c + 1'tau_old))).
inline bool mh_accept_constrained(const Vector& tau_new, const Vector& tau_old, double c,
                                  Rng& rng) {
  const double ratio = std::sqrt((c + tau_new.sum()) / (c + tau_old.sum()));
  if (ratio >= 1.0) return true;
  return uniform01(rng) < ratio;
}

/// General linear constraints: ratio sqrt(det(A D_new A' + cI) / det(A D_old A' + cI)).
inline bool mh_accept_linear(const Matrix& a, const Vector& tau_new, const Vector& tau_old,
                             double c, Rng& rng) {
  const auto logdet = [&](const Vector& tau) {
    const Matrix m = a * tau.asDiagonal() * a.transpose() +
                     c * Matrix::Identity(a.rows(), a.rows());
    const Eigen::LLT<Matrix> llt(symmetrize(m));
    require(llt.info() == Eigen::Success, ErrorCode::degenerate_constraint,
            "A diag(tau) A' is singular");
    const Matrix l = llt.matrixL();
    return 2.0 * l.diagonal().array().log().sum();
  };
  const double log_ratio = 0.5 * (logdet(tau_new) - logdet(tau_old));
  if (log_ratio >= 0.0) return true;
  return uniform01(rng) < std::exp(log_ratio);
}

struct McmcConfig {
  int iterations = 2500;  // total sweeps, burn-in included
  int burn_in = 500;
  int thin = 1;
  std::uint64_t seed = 0;
  double jitter = 1e-9;   // c in the constrained acceptance ratio

  void validate() const {
    require(iterations > burn_in && burn_in >= 0, ErrorCode::invalid_spec,
            "MCMC needs iterations > burn_in >= 0");
    require(thin >= 1, ErrorCode::invalid_spec, "MCMC thinning must be >= 1");
    require(jitter > 0.0 && std::isfinite(jitter), ErrorCode::invalid_spec,
            "MCMC jitter must be positive");
  }
};

/// Everything needed to continue a chain exactly where it stopped.
struct ChainState {
  Path path;     // current w_{1:h}
  Matrix tau;    // h x k; rows of steps with infinite lambda are unused
  Rng rng;
  int iteration = 0;
  long proposals = 0;  // constrained MH proposals
  long accepts = 0;
  std::vector<Vector> means;  // retained conditional margins of w_1
  std::vector<Matrix> covs;
  std::vector<double> trace_abs;  // 1'|w_1| of retained draws
  std::vector<double> trace_sd;   // sqrt(w_1' K_1^{-1} w_1) of retained draws
};

/// Conditional margin of w_1 given the scales used in one sweep.
struct SweepDraw {
  Vector mean;
  Matrix cov;
};

namespace detail {

inline void require_laplace(const ForecastMoments& fm, const LossSpec& spec) {
  require_compatible(fm, spec);
  require(spec.family == LossFamily::laplace, ErrorCode::invalid_spec,
          "the marginal sampler needs a laplace loss");
}

inline void draw_scales(ChainState& s, const LossSpec& spec, const McmcConfig& cfg) {
  const auto k = spec.w0.size();
  for (int t = 0; t < spec.horizon(); ++t) {
    if (!std::isfinite(spec.lambda[t])) continue;
    const double a = 1.0 / (spec.lambda[t] * spec.lambda[t]);
    const Vector& prev = t == 0 ? spec.w0 : s.path[t - 1];
    for (Eigen::Index j = 0; j < k; ++j) {
      const double d = s.path[t](j) - prev(j);
      const double b = std::max(d * d, 1e-300);
      const double draw = sample_gig_half(a, b, s.rng);
      if (!spec.constraint) {
        s.tau(t, j) = draw;
        continue;
      }
      Vector current = s.tau.row(t).transpose();
      Vector proposed = current;
      proposed(j) = draw;
      ++s.proposals;
      const bool ok = spec.constraint->is_sum_to_one()
                          ? mh_accept_constrained(proposed, current, cfg.jitter, s.rng)
                          : mh_accept_linear(spec.constraint->A, proposed, current,
                                             cfg.jitter, s.rng);
      if (ok) {
        s.tau(t, j) = draw;
        ++s.accepts;
      }
    }
  }
}

}  // namespace detail

/// Starting state: the quadratic-loss path with scales drawn unconstrained
/// from its increments.
inline ChainState init_chain(const ForecastMoments& fm, const LossSpec& spec,
                             const McmcConfig& cfg) {
  detail::require_laplace(fm, spec);
  cfg.validate();
  ChainState s;
  s.rng.seed(cfg.seed);
  s.path = em_initial_path(fm, spec);
  const auto k = fm.dim();
  s.tau = Matrix::Zero(fm.horizon(), k);
  for (int t = 0; t < fm.horizon(); ++t) {
    if (!std::isfinite(spec.lambda[t])) continue;
    const double a = 1.0 / (spec.lambda[t] * spec.lambda[t]);
    const Vector& prev = t == 0 ? spec.w0 : s.path[t - 1];
    for (Eigen::Index j = 0; j < k; ++j) {
      const double d = s.path[t](j) - prev(j);
      s.tau(t, j) = sample_gig_half(a, std::max(d * d, 1e-300), s.rng);
    }
  }
  return s;
}

/// One sweep: scales given the path, then a path draw given the scales. The
/// returned margin comes from the same filter pass as the path draw.
inline SweepDraw gibbs_sweep(ChainState& s, const ForecastMoments& fm, const LossSpec& spec,
                             const McmcConfig& cfg) {
  detail::draw_scales(s, spec, cfg);
  LatentScales scales;
  scales.tau = s.tau;
  const SyntheticDLM model = build_laplace_emulator(fm, spec, scales);
  const FilterMoments filter = forward_filter(model);
  const SmoothedPath smooth = backward_smooth(filter, model);
  s.path = backward_sample(filter, model, s.rng).mean;
  ++s.iteration;
  return {smooth.mean[0], smooth.cov[0]};
}

/// Runs sweeps until s.iteration reaches cfg.iterations, retaining margins
/// after burn-in at the thinning interval. max_sweeps < 0 means no limit.
inline void advance_chain(ChainState& s, const ForecastMoments& fm, const LossSpec& spec,
                          const McmcConfig& cfg, int max_sweeps = -1) {
  detail::require_laplace(fm, spec);
  cfg.validate();
  require(s.tau.rows() == fm.horizon() && s.tau.cols() == fm.dim() &&
              static_cast<int>(s.path.size()) == fm.horizon(),
          ErrorCode::shape_error, "chain state does not match the problem");
  const Eigen::LLT<Matrix> risk(fm.precision[0]);
  for (int n = 0; s.iteration < cfg.iterations && (max_sweeps < 0 || n < max_sweeps); ++n) {
    SweepDraw d = gibbs_sweep(s, fm, spec, cfg);
    const int after = s.iteration - cfg.burn_in;
    if (after <= 0 || (after - 1) % cfg.thin != 0) continue;
    const Vector& w1 = s.path[0];
    s.trace_abs.push_back(w1.lpNorm<1>());
    s.trace_sd.push_back(std::sqrt(w1.dot(risk.solve(w1))));
    s.means.push_back(std::move(d.mean));
    s.covs.push_back(std::move(d.cov));
  }
}

/// Split-chain potential scale reduction over one or more scalar traces.
inline double split_rhat(const std::vector<std::vector<double>>& chains) {
  std::vector<std::vector<double>> halves;
  for (const auto& c : chains) {
    const std::size_t n = c.size() / 2;
    if (n < 2) continue;
    halves.emplace_back(c.begin(), c.begin() + n);
    halves.emplace_back(c.end() - n, c.end());
  }
  require(!halves.empty(), ErrorCode::insufficient_data, "R-hat needs at least 4 draws");
  const std::size_t n = std::min_element(halves.begin(), halves.end(), [](auto& x, auto& y) {
                          return x.size() < y.size();
                        })->size();
  const double m = static_cast<double>(halves.size());
  std::vector<double> means, vars;
  for (const auto& hv : halves) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += hv[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (hv[i] - mean) * (hv[i] - mean) / (n - 1);
    means.push_back(mean);
    vars.push_back(var);
  }
  double grand = 0.0;
  for (double x : means) grand += x / m;
  double between = 0.0;
  for (double x : means) between += (x - grand) * (x - grand);
  between *= static_cast<double>(n) / (m - 1.0);
  double within = 0.0;
  for (double v : vars) within += v / m;
  if (within <= 0.0) return between <= 0.0 ? 1.0 : kInf;
  const double nn = static_cast<double>(n);
  return std::sqrt(((nn - 1.0) / nn * within + between / nn) / within);
}

struct ChainResult {
  MixtureOfNormals mixture;
  double acceptance_rate = 1.0;  // constrained MH; 1 when unconstrained
  double rhat_abs = 1.0;         // on 1'|w_1|
  double rhat_sd = 1.0;          // on the portfolio standard deviation
  bool converged = true;         // both R-hat values below 1.1
  std::vector<ChainState> chains;
};

inline constexpr double kRhatThreshold = 1.1;

/// Pools finished chains (in order) into one mixture plus diagnostics.
inline ChainResult assemble_chains(std::vector<ChainState> chains) {
  require(!chains.empty(), ErrorCode::invalid_spec, "no chains to assemble");
  std::vector<Vector> means;
  std::vector<Matrix> covs;
  std::vector<std::vector<double>> ta, ts;
  long props = 0, accs = 0;
  for (const auto& c : chains) {
    means.insert(means.end(), c.means.begin(), c.means.end());
    covs.insert(covs.end(), c.covs.begin(), c.covs.end());
    ta.push_back(c.trace_abs);
    ts.push_back(c.trace_sd);
    props += c.proposals;
    accs += c.accepts;
  }
  require(!means.empty(), ErrorCode::insufficient_data, "chains retained no components");
  ChainResult out;
  out.mixture = MixtureOfNormals(std::move(means), std::move(covs));
  out.acceptance_rate = props > 0 ? static_cast<double>(accs) / static_cast<double>(props) : 1.0;
  std::size_t shortest = ta[0].size();
  for (const auto& t : ta) shortest = std::min(shortest, t.size());
  if (shortest >= 4) {
    out.rhat_abs = split_rhat(ta);
    out.rhat_sd = split_rhat(ts);
  } else {
    out.rhat_abs = out.rhat_sd = kInf;
  }
  // a constant summary (e.g. 1'|w_1| with all weights positive under
  // sum-to-one) gives R-hat 1 by convention
  out.converged = out.rhat_abs < kRhatThreshold && out.rhat_sd < kRhatThreshold;
  out.chains = std::move(chains);
  return out;
}

/// Single chain; pass a checkpointed state to resume it.
inline ChainResult run_chain(const ForecastMoments& fm, const LossSpec& spec,
                             const McmcConfig& cfg,
                             std::optional<ChainState> resume = std::nullopt) {
  ChainState s = resume ? std::move(*resume) : init_chain(fm, spec, cfg);
  advance_chain(s, fm, spec, cfg);
  std::vector<ChainState> v;
  v.push_back(std::move(s));
  return assemble_chains(std::move(v));
}

/// Independent chains on separate threads; chain c uses seed
/// derive_seed(cfg.seed, c). The merged result does not depend on threads.
inline ChainResult run_chains(const ForecastMoments& fm, const LossSpec& spec,
                              const McmcConfig& cfg, int n_chains, int threads = 0) {
  require(n_chains >= 1, ErrorCode::invalid_spec, "need at least one chain");
  detail::require_laplace(fm, spec);
  cfg.validate();
  std::vector<ChainState> chains(n_chains);
  std::vector<std::exception_ptr> errors(n_chains);
  const auto work = [&](int c) {
    try {
      McmcConfig sub = cfg;
      sub.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(c));
      chains[c] = init_chain(fm, spec, sub);
      advance_chain(chains[c], fm, spec, sub);
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };
  int workers = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
  workers = std::clamp(workers, 1, n_chains);
  if (workers == 1) {
    for (int c = 0; c < n_chains; ++c) work(c);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (int c = w; c < n_chains; c += workers) work(c);
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return assemble_chains(std::move(chains));
}

// ---------------------------------------------------------------------------
// Checkpoints: a versioned JSON document holding the full chain state.

inline constexpr std::string_view kChainFormat = "emuport-chain";
inline constexpr int kChainVersion = 1;

namespace detail {

inline nlohmann::json vec_json(const Vector& v) {
  return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline nlohmann::json mat_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vec_json(m.row(i).transpose()));
  return rows;
}

inline Vector json_vec(const nlohmann::json& j, Eigen::Index n) {
  const auto v = j.get<std::vector<double>>();
  require(static_cast<Eigen::Index>(v.size()) == n, ErrorCode::parse_error,
          "checkpoint vector length");
  return Eigen::Map<const Vector>(v.data(), n);
}

inline Matrix json_mat(const nlohmann::json& j, Eigen::Index r, Eigen::Index c) {
  require(j.is_array() && static_cast<Eigen::Index>(j.size()) == r, ErrorCode::parse_error,
          "checkpoint matrix rows");
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) m.row(i) = json_vec(j[i], c).transpose();
  return m;
}

}  // namespace detail

inline std::string chain_to_json(const ChainState& s, const McmcConfig& cfg) {
  using nlohmann::json;
  const auto k = s.tau.cols();
  json j;
  j["format"] = kChainFormat;
  j["version"] = kChainVersion;
  j["k"] = k;
  j["h"] = s.tau.rows();
  j["config"] = {{"iterations", cfg.iterations}, {"burn_in", cfg.burn_in},
                 {"thin", cfg.thin}, {"seed", cfg.seed}, {"jitter", cfg.jitter}};
  j["iteration"] = s.iteration;
  j["proposals"] = s.proposals;
  j["accepts"] = s.accepts;
  std::ostringstream rng;
  rng << s.rng;
  j["rng"] = rng.str();
  json path = json::array();
  for (const auto& w : s.path) path.push_back(detail::vec_json(w));
  j["path"] = path;
  j["tau"] = detail::mat_json(s.tau);
  json comps = json::array();
  for (std::size_t i = 0; i < s.means.size(); ++i)
    comps.push_back({{"mean", detail::vec_json(s.means[i])}, {"cov", detail::mat_json(s.covs[i])}});
  j["components"] = comps;
  j["trace_abs"] = s.trace_abs;
  j["trace_sd"] = s.trace_sd;
  return j.dump();
}

/// Parses a checkpoint; burn-in, thinning and jitter must match cfg (the
/// iteration budget may be extended).
inline ChainState chain_from_json(const std::string& text, const McmcConfig& cfg) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::parse_error, std::string("checkpoint is not valid JSON: ") + e.what());
  }
  try {
    require(j.at("format").get<std::string>() == kChainFormat, ErrorCode::parse_error,
            "not a chain checkpoint");
    require(j.at("version").get<int>() == kChainVersion, ErrorCode::parse_error,
            "unsupported checkpoint version");
    const auto& c = j.at("config");
    require(c.at("burn_in").get<int>() == cfg.burn_in && c.at("thin").get<int>() == cfg.thin &&
                c.at("jitter").get<double>() == cfg.jitter,
            ErrorCode::config_error, "checkpoint was written with a different configuration");
    const auto k = j.at("k").get<Eigen::Index>();
    const auto h = j.at("h").get<Eigen::Index>();
    ChainState s;
    s.iteration = j.at("iteration").get<int>();
    s.proposals = j.at("proposals").get<long>();
    s.accepts = j.at("accepts").get<long>();
    std::istringstream rng(j.at("rng").get<std::string>());
    rng >> s.rng;
    require(!rng.fail(), ErrorCode::parse_error, "checkpoint RNG state");
    const auto& path = j.at("path");
    require(path.is_array() && static_cast<Eigen::Index>(path.size()) == h,
            ErrorCode::parse_error, "checkpoint path length");
    for (const auto& w : path) s.path.push_back(detail::json_vec(w, k));
    s.tau = detail::json_mat(j.at("tau"), h, k);
    for (const auto& comp : j.at("components")) {
      s.means.push_back(detail::json_vec(comp.at("mean"), k));
      s.covs.push_back(detail::json_mat(comp.at("cov"), k, k));
    }
    s.trace_abs = j.at("trace_abs").get<std::vector<double>>();
    s.trace_sd = j.at("trace_sd").get<std::vector<double>>();
    require(s.trace_abs.size() == s.means.size() && s.trace_sd.size() == s.means.size(),
            ErrorCode::parse_error, "checkpoint trace lengths");
    return s;
  } catch (const json::exception& e) {
    fail(ErrorCode::parse_error, std::string("malformed checkpoint: ") + e.what());
  }
}

/// Marginal decision: the mode of the mixture approximation to p(w_1).
struct MarginalSolution {
  Vector w1;
  MarginalMode mode;
  double acceptance_rate = 1.0;
  double rhat_abs = 1.0;
  double rhat_sd = 1.0;
  bool converged = true;
};

inline MarginalSolution solve_marginal(const ForecastMoments& fm, const LossSpec& spec,
                                       const McmcConfig& mcmc = {},
                                       const ModeSearchConfig& search = {}, int n_chains = 1) {
  const ChainResult chains = run_chains(fm, spec, mcmc, n_chains);
  MarginalSolution out;
  out.mode = find_marginal_mode(chains.mixture, search);
  out.w1 = out.mode.w;
  out.acceptance_rate = chains.acceptance_rate;
  out.rhat_abs = chains.rhat_abs;
  out.rhat_sd = chains.rhat_sd;
  out.converged = chains.converged;
  return out;
}

}  // namespace emuport

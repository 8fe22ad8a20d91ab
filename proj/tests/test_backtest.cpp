#include <gtest/gtest.h>

#include <cmath>

#include "emuport/backtest.hpp"
#include "oracles.hpp"

using namespace emuport;
using namespace emuport::testing;

namespace {

BacktestRecord record(Vector w_prev, Vector w, const Vector& r) {
  BacktestRecord rec;
  rec.w_prev = std::move(w_prev);
  rec.w = std::move(w);
  rec.growth = (r.array() + 1.0).matrix().dot(rec.w);
  rec.turnover = (rec.w - rec.w_prev).cwiseAbs().sum();
  return rec;
}

// Small, fast configuration on a seeded synthetic market.
struct SmallRun {
  Matrix prices;
  DdnmSpec spec;
  BacktestConfig cfg;
};

SmallRun small_run(std::uint64_t seed, int days = 20) {
  SmallRun r;
  SyntheticMarket mk;
  mk.days = 120 + days;
  r.prices = mk.generate(seed);
  r.spec.paths = 600;
  r.cfg.training_days = 120;
  r.cfg.seed = seed;
  r.cfg.horizon = 3;
  return r;
}

}  // namespace

TEST(CumulativeReturns, HandExample) {
  const auto rec = record(Eigen::Vector2d(1, 0), Eigen::Vector2d(0.5, 0.5),
                          Eigen::Vector2d(0.1, -0.1));
  EXPECT_NEAR(period_factor(rec.growth, rec.turnover, 0.001), 0.999, 1e-15);
  const auto r = cumulative_returns(std::vector<BacktestRecord>{rec}, 0.001);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_NEAR(r[0], -0.001, 1e-15);
}

TEST(CumulativeReturns, ZeroReturnsConstantWeights) {
  std::vector<BacktestRecord> recs;
  const Vector w = Eigen::Vector3d(0.2, 0.3, 0.5);
  for (int t = 0; t < 10; ++t) recs.push_back(record(w, w, Vector::Zero(3)));
  for (double r : cumulative_returns(recs, 0.0)) EXPECT_NEAR(r, 0.0, 1e-15);
}

TEST(CumulativeReturns, RuinContinuesWithTheProduct) {
  std::vector<BacktestRecord> recs;
  recs.push_back(record(Eigen::Vector2d(1, 0), Eigen::Vector2d(-5, 6), Eigen::Vector2d(0, 0)));
  recs.push_back(record(Eigen::Vector2d(-5, 6), Eigen::Vector2d(-5, 6), Eigen::Vector2d(0.01, 0)));
  std::vector<const BacktestRecord*> ptrs{&recs[0], &recs[1]};
  // factor 1 = 1 - 0.1 * 12 = -0.2
  const auto r = cumulative_returns(ptrs, 0.1);
  EXPECT_NEAR(r[0], -1.2, 1e-14);
  EXPECT_NEAR(r[1], -0.2 * (1.0 - 0.05) - 1.0, 1e-14);
  EXPECT_EQ(ruin_flags(ptrs, 0.1), (std::vector<bool>{true, true}));
  EXPECT_EQ(ruin_flags(ptrs, 0.0), (std::vector<bool>{false, false}));
}

TEST(RealizedSd, BoundIdentities) {
  std::mt19937_64 rng(41);
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::Index k = 2 + rep % 4;
    const Matrix prec = random_spd(rng, k);
    const auto mv = min_variance_bound(prec);
    EXPECT_NEAR(portfolio_sd(prec, mv.w), mv.sd, 1e-10);
    for (int i = 0; i < 10; ++i) {
      Vector w = random_vector(rng, k);
      w(0) += 1.0 - w.sum();
      EXPECT_GE(portfolio_sd(prec, w), mv.sd - 1e-12);
    }
  }
  for (int k = 1; k <= 6; ++k)
    EXPECT_NEAR(portfolio_sd(Matrix::Identity(k, k), Vector::Constant(k, 1.0 / k)),
                1.0 / std::sqrt(k), 1e-15);
}

TEST(Backtest, RecordsAreConsistent) {
  auto run = small_run(1);
  run.cfg.costs = {0.0, 0.0005, 0.001, 0.01};
  const auto res = run_backtest(run.prices, run.spec, run.cfg);
  ASSERT_EQ(res.days, 20);
  ASSERT_EQ(res.records.size(), 40u);
  EXPECT_EQ(res.failures, 0);
  for (std::size_t s = 0; s < res.strategy_names.size(); ++s) {
    const auto recs = res.strategy_records(s);
    std::vector<std::vector<double>> per_cost;
    for (std::size_t c = 0; c < res.costs.size(); ++c) {
      per_cost.push_back(cumulative_returns(recs, res.costs[c]));
      for (std::size_t i = 0; i < recs.size(); ++i)
        EXPECT_EQ(recs[i]->cumulative[c], per_cost[c][i]);  // bit-exact
    }
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const auto* r = recs[i];
      // monotone in the cost for the same weight path
      for (std::size_t c = 1; c < res.costs.size(); ++c)
        EXPECT_LE(per_cost[c][i], per_cost[c - 1][i]);
      EXPECT_GE(r->turnover, 0.0);
      EXPECT_GE(r->sd, r->bound - 1e-12);
      EXPECT_LE(std::abs(r->w.sum() - 1.0), 1e-9);
      if (i > 0) {
        EXPECT_EQ(r->w_prev, recs[i - 1]->w);
      }
      const Vector g = (run.prices.row(r->time + 1).array() / run.prices.row(r->time).array())
                           .matrix()
                           .transpose();
      EXPECT_NEAR(r->growth, g.dot(r->w), 1e-14);
    }
  }
}

TEST(Backtest, MatchesIndependentlyReplayedProtocol) {
  auto run = small_run(2, 6);
  run.cfg.horizon = 1;
  run.cfg.strategies = {StrategySpec::of(StrategyKind::markowitz)};
  run.cfg.keep_moments = true;
  const Matrix y = run.prices.array().log().matrix();
  run.spec.parents = {{}, {0}, {1}};
  const auto res = run_backtest(run.prices, run.spec, run.cfg);
  ASSERT_EQ(res.moments.size(), 6u);
  for (int day = 0; day < 6; ++day) {
    const int t = run.cfg.training_days - 1 + day;
    // prior from the training window, then filtering forward to row t
    DdnmState st = ddnm_filter(run.spec, y.topRows(run.cfg.training_days));
    for (int s = run.cfg.training_days; s <= t; ++s)
      ddnm_update(st, run.spec, y.row(s).transpose());
    const auto paths =
        simulate_forecast_paths(st, run.spec, 1, run.spec.paths, derive_seed(run.cfg.seed, day));
    const auto fm = paths_to_return_moments(paths);
    EXPECT_EQ(fm.mean[0], res.moments[day].mean[0]);
    const Vector w = markowitz_myopic(fm.mean[0], fm.precision[0], run.cfg.target).w;
    EXPECT_EQ(res.records[day].w, w);
    if (day == 0) {
      EXPECT_EQ(res.records[0].w_prev, w);  // initial holdings
    }
  }
}

TEST(Backtest, BitReproducible) {
  auto run = small_run(3);
  run.cfg.strategies.push_back(StrategySpec::of(StrategyKind::laplace_profiled));
  const auto a = run_backtest(run.prices, run.spec, run.cfg);
  const auto b = run_backtest(run.prices, run.spec, run.cfg);
  run.cfg.threads = 3;
  const auto c = run_backtest(run.prices, run.spec, run.cfg);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].w, b.records[i].w);
    EXPECT_EQ(a.records[i].cumulative, b.records[i].cumulative);
    EXPECT_EQ(a.records[i].w, c.records[i].w);
  }
}

TEST(Backtest, EveryStrategyStaysOnTheSimplexPlane) {
  auto run = small_run(4, 5);
  auto extended = StrategySpec::of(StrategyKind::extended_laplace);
  extended.gamma = 100.0;
  run.cfg.strategies = {StrategySpec::of(StrategyKind::markowitz),
                        StrategySpec::of(StrategyKind::normal),
                        StrategySpec::of(StrategyKind::laplace_profiled),
                        StrategySpec::of(StrategyKind::laplace_marginal), extended};
  run.cfg.mcmc.iterations = 300;
  run.cfg.mcmc.burn_in = 100;
  const auto res = run_backtest(run.prices, run.spec, run.cfg);
  EXPECT_EQ(res.failures, 0);
  for (const auto& r : res.records) EXPECT_LE(std::abs(r.w.sum() - 1.0), 1e-9);
}

TEST(Backtest, FailedStrategyCarriesPortfolioOver) {
  auto run = small_run(5, 8);
  int calls = 0;
  const StrategySolver flaky = [&](const StrategySpec& s, const ForecastMoments& fm,
                                   const Vector& w0, std::uint64_t seed) -> Vector {
    if (s.kind == StrategyKind::normal && ++calls == 4)
      fail(ErrorCode::flat_region, "injected failure");
    return solve_strategy(s, fm, run.cfg.target, w0, run.cfg, seed);
  };
  const auto res = run_backtest(run.prices, run.spec, run.cfg, flaky);
  EXPECT_EQ(res.failures, 1);
  const auto recs = res.strategy_records(1);
  int flagged = 0;
  for (const auto* r : recs) {
    if (!r->failed) continue;
    ++flagged;
    EXPECT_EQ(r->w, r->w_prev);
    EXPECT_EQ(r->turnover, 0.0);
    EXPECT_NE(r->failure.find("injected"), std::string::npos);
  }
  EXPECT_EQ(flagged, 1);
}

TEST(Backtest, ConstantPricesGiveZeroReturns) {
  const Matrix prices = Matrix::Constant(140, 3, 50.0);
  DdnmSpec spec;
  spec.paths = 300;
  BacktestConfig cfg;
  cfg.training_days = 120;
  cfg.horizon = 2;
  cfg.strategies = {StrategySpec::of(StrategyKind::normal)};
  const auto res = run_backtest(prices, spec, cfg);
  for (const auto& r : res.records) {
    EXPECT_NEAR(r.growth, 1.0, 1e-9);
    for (std::size_t c = 0; c < cfg.costs.size(); ++c) EXPECT_LE(r.cumulative[c], 1e-9);
  }
}

TEST(Backtest, RejectsBadInputs) {
  auto run = small_run(6);
  BacktestConfig bad = run.cfg;
  bad.costs = {-0.1};
  EXPECT_THROW(run_backtest(run.prices, run.spec, bad), Error);
  Matrix neg = run.prices;
  neg(3, 1) = -1.0;
  try {
    run_backtest(neg, run.spec, run.cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_price);
  }
  try {
    run_backtest(run.prices.topRows(100), run.spec, run.cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::insufficient_data);
  }
  EXPECT_THROW(parse_strategy("momentum"), Error);
  EXPECT_EQ(parse_strategy("laplace_marginal"), StrategyKind::laplace_marginal);
}

TEST(SyntheticMarketTest, SeededAndPositive) {
  SyntheticMarket mk;
  const Matrix a = mk.generate(9), b = mk.generate(9), c = mk.generate(10);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_TRUE((a.array() > 0.0).all());
  EXPECT_EQ(a.rows(), mk.days);
  EXPECT_DOUBLE_EQ(a(0, 0), mk.start_price);
}

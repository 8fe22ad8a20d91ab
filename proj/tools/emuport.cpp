// Command-line front end: select-parents, backtest, optimize-once, report and
// generate-prices. Exit codes: 0 success, 1 usage error, 2 library error,
// 3 completed with flagged per-day failures.

#include <CLI11.hpp>

#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>

#include "emuport/emuport.hpp"

namespace fs = std::filesystem;
using namespace emuport;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitLibrary = 2;
constexpr int kExitFlagged = 3;

struct CommonOptions {
  std::string config;
  std::string prices;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool deterministic = false;
};

void error_json(const std::string& kind, const std::string& message, int exit_code) {
  nlohmann::ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  j["exit_code"] = exit_code;
  std::cerr << j.dump() << "\n";
}

RunConfig load_run_config(const CommonOptions& o) {
  RunConfig c = o.config.empty() ? parse_config_text("") : parse_config(o.config);
  if (o.seed) {
    c.seed = *o.seed;
    c.backtest.seed = *o.seed;
  }
  if (o.threads) c.backtest.threads = *o.threads;
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.deterministic) c.deterministic = true;
  // Simulation output does not depend on the thread count; this only rules
  // out any scheduling-dependent work.
  if (c.deterministic) c.backtest.threads = 1;
  c.validate();
  return c;
}

fs::path require_out(const RunConfig& c) {
  require(!c.output_dir.empty(), ErrorCode::config_error,
          "an output directory is needed (--out or run.out)");
  return c.output_dir;
}

PriceTable require_prices(const CommonOptions& o, const RunConfig& c) {
  require(!o.prices.empty(), ErrorCode::config_error, "--prices is required");
  return load_price_csv(o.prices, c.missing);
}

Matrix training_logs(const PriceTable& t, int training_days) {
  require(t.rows() >= training_days, ErrorCode::insufficient_data,
          "price table has " + std::to_string(t.rows()) + " rows, training needs " +
              std::to_string(training_days));
  return t.prices.topRows(training_days).array().log().matrix();
}

int cmd_select_parents(const CommonOptions& o) {
  const RunConfig c = load_run_config(o);
  const PriceTable t = require_prices(o, c);
  const auto parents = select_parents(training_logs(t, c.backtest.training_days),
                                      c.backtest.parent_threshold, c.forecast);
  const std::string table = format_parents(parents, t.names);
  if (c.output_dir.empty()) {
    std::cout << table;
    return 0;
  }
  const fs::path out = c.output_dir;
  OutputLock lock(out);
  write_file(out / "parents.txt", table);
  ManifestInfo info;
  info.command = "select-parents";
  info.names = t.names;
  info.parents = parents;
  info.files = {"parents.txt", "manifest.json"};
  write_file(out / "manifest.json", manifest_json(c, info));
  std::cout << table;
  return 0;
}

int cmd_backtest(const CommonOptions& o) {
  const RunConfig c = load_run_config(o);
  const fs::path out = require_out(c);
  const PriceTable t = require_prices(o, c);
  OutputLock lock(out);
  DdnmSpec spec = c.forecast;
  spec.names = t.names;
  if (!c.parents_file.empty()) {
    fs::path p = c.parents_file;
    if (p.is_relative() && !o.config.empty()) p = fs::path(o.config).parent_path() / p;
    spec.parents = parse_parents(read_file(p), t.names);
  }
  const BacktestResult res = run_backtest(t.prices, spec, c.backtest);
  auto files = emit_report(res, t.names, t.dates, out);
  write_file(out / "parents.txt", format_parents(res.parents, t.names));
  files.push_back("parents.txt");
  files.push_back("manifest.json");
  ManifestInfo info;
  info.command = "backtest";
  info.names = t.names;
  info.parents = res.parents;
  info.files = files;
  info.days = res.days;
  info.failures = res.failures;
  if (!res.records.empty()) {
    info.first_date = record_date(res.records.front(), t.dates);
    info.last_date = record_date(res.records.back(), t.dates);
  }
  write_file(out / "manifest.json", manifest_json(c, info));

  nlohmann::ordered_json summary;
  summary["days"] = res.days;
  summary["failures"] = res.failures;
  for (std::size_t s = 0; s < res.strategy_names.size(); ++s) {
    const auto recs = res.strategy_records(s);
    nlohmann::ordered_json js;
    for (std::size_t k = 0; k < res.costs.size(); ++k)
      js["R(delta=" + format_double(res.costs[k]) + ")"] =
          recs.empty() ? 0.0 : recs.back()->cumulative[k];
    summary["strategies"][res.strategy_names[s]] = js;
  }
  std::cout << summary.dump(2) << "\n";
  if (res.failures > 0) {
    error_json("flagged failures",
               std::to_string(res.failures) + " strategy decisions failed and were carried over",
               kExitFlagged);
    return kExitFlagged;
  }
  return 0;
}

int cmd_optimize_once(const CommonOptions& o, const std::string& moments_path,
                      const std::vector<std::string>& only) {
  const RunConfig c = load_run_config(o);
  const MomentsFile mf = parse_moments_json(read_file(moments_path));
  const auto& fm = mf.moments;
  const Vector w0 = mf.w0 ? *mf.w0 : initial_portfolio(fm, c.backtest.target);
  require(w0.size() == fm.dim(), ErrorCode::shape_error, "w0 length differs from the moments");
  const auto bound = min_variance_bound(fm.precision[0]);
  nlohmann::ordered_json j;
  j["w0"] = std::vector<double>(w0.data(), w0.data() + w0.size());
  j["min_variance_sd"] = bound.sd;
  int failures = 0;
  for (std::size_t i = 0; i < c.backtest.strategies.size(); ++i) {
    const auto& s = c.backtest.strategies[i];
    if (!only.empty() && std::find(only.begin(), only.end(), s.name()) == only.end()) continue;
    nlohmann::ordered_json js;
    try {
      const Vector w = solve_strategy(s, fm, c.backtest.target, w0, c.backtest,
                                      derive_seed(c.seed, 0, i + 1));
      js["w"] = std::vector<double>(w.data(), w.data() + w.size());
      js["expected_return"] = fm.mean[0].dot(w);
      js["sd"] = portfolio_sd(fm.precision[0], w);
      js["turnover"] = (w - w0).cwiseAbs().sum();
      js["nonzero"] = (w.array().abs() > c.backtest.sparsity_threshold).count();
    } catch (const Error& e) {
      js["error"] = std::string(to_string(e.code()));
      js["message"] = e.detail();
      ++failures;
    }
    j["strategies"][s.name()] = js;
  }
  require(j.contains("strategies"), ErrorCode::config_error, "no strategy matched --strategy");
  const std::string text = j.dump(2) + "\n";
  if (!c.output_dir.empty()) {
    const fs::path out = c.output_dir;
    OutputLock lock(out);
    write_file(out / "decision.json", text);
    ManifestInfo info;
    info.command = "optimize-once";
    info.files = {"decision.json", "manifest.json"};
    info.failures = failures;
    write_file(out / "manifest.json", manifest_json(c, info));
  }
  std::cout << text;
  if (failures > 0) {
    error_json("flagged failures", std::to_string(failures) + " strategies failed", kExitFlagged);
    return kExitFlagged;
  }
  return 0;
}

int cmd_report(const CommonOptions& o, const std::string& results_path) {
  const RunConfig c = load_run_config(o);
  const fs::path out = require_out(c);
  const LoadedResults loaded = parse_results_csv(read_file(results_path));
  OutputLock lock(out);
  auto files = emit_report(loaded.result, loaded.names, loaded.dates, out);
  files.push_back("manifest.json");
  ManifestInfo info;
  info.command = "report";
  info.names = loaded.names;
  info.files = files;
  info.days = loaded.result.days;
  info.failures = loaded.result.failures;
  write_file(out / "manifest.json", manifest_json(c, info));
  return 0;
}

int cmd_generate(const CommonOptions& o, int days, int assets) {
  const RunConfig c = load_run_config(o);
  SyntheticMarket mk;
  mk.days = days;
  mk.k = assets;
  PriceTable t;
  t.prices = mk.generate(c.seed);
  t.dates = synthetic_dates(days);
  for (int j = 0; j < assets; ++j) t.names.push_back("S" + std::to_string(j + 1));
  const std::string text = format_price_csv(t);
  if (o.prices.empty()) std::cout << text;
  else write_file(o.prices, text);
  return 0;
}

void add_common(CLI::App* sub, CommonOptions& o, bool prices, bool out) {
  sub->add_option("--config", o.config, "INI configuration file")->check(CLI::ExistingFile);
  if (prices) sub->add_option("--prices", o.prices, "price CSV (date,NAME1,...)");
  if (out) sub->add_option("--out", o.out, "output directory");
  sub->add_option("--seed", o.seed, "global seed (overrides the config)");
  sub->add_option("--threads", o.threads, "simulation threads")->check(CLI::PositiveNumber);
  sub->add_flag("--deterministic", o.deterministic, "single-threaded, reproducible run");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-step portfolio decisions by Bayesian emulation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  CommonOptions opts;
  std::string moments_path, results_path;
  std::vector<std::string> only;
  int gen_days = 800, gen_assets = 3;

  auto* sp = app.add_subcommand("select-parents", "choose contemporaneous parents from training data");
  add_common(sp, opts, true, true);
  auto* bt = app.add_subcommand("backtest", "run the rolling backtest and write report files");
  add_common(bt, opts, true, true);
  auto* oo = app.add_subcommand("optimize-once", "one decision from a moments JSON file");
  add_common(oo, opts, false, true);
  oo->add_option("--moments", moments_path, "moments JSON")->required()->check(CLI::ExistingFile);
  oo->add_option("--strategy", only, "restrict to these strategy labels");
  auto* rp = app.add_subcommand("report", "rebuild plot-ready tables from a results.csv");
  add_common(rp, opts, false, true);
  rp->add_option("--results", results_path, "results.csv of a backtest")
      ->required()
      ->check(CLI::ExistingFile);
  auto* gp = app.add_subcommand("generate-prices", "write a seeded synthetic price CSV");
  add_common(gp, opts, true, false);
  gp->add_option("--days", gen_days, "rows")->check(CLI::Range(3, 10000000));
  gp->add_option("--assets", gen_assets, "series")->check(CLI::Range(1, 1000));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    error_json("usage", e.what(), kExitUsage);
    return kExitUsage;
  }

  try {
    if (sp->parsed()) return cmd_select_parents(opts);
    if (bt->parsed()) return cmd_backtest(opts);
    if (oo->parsed()) return cmd_optimize_once(opts, moments_path, only);
    if (rp->parsed()) return cmd_report(opts, results_path);
    if (gp->parsed()) return cmd_generate(opts, gen_days, gen_assets);
  } catch (const Error& e) {
    error_json(std::string(to_string(e.code())), e.detail(), kExitLibrary);
    return kExitLibrary;
  } catch (const std::exception& e) {
    error_json("internal", e.what(), kExitLibrary);
    return kExitLibrary;
  }
  return kExitUsage;
}

#pragma once

// File formats: price CSV ingestion, INI run configuration, result tables,
// plot-ready report CSVs, run manifest JSON, moments JSON and the output
// directory lock.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "emuport/backtest.hpp"

namespace emuport {

inline constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------- numbers

/// Shortest representation that parses back to the same double.
inline std::string format_double(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  if (std::isnan(x)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline bool parse_double(std::string_view s, double& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  if (s == "inf" || s == "+inf" || s == "infinity") {
    out = kInf;
    return true;
  }
  if (s == "-inf") {
    out = -kInf;
    return true;
  }
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

template <class Int>
bool parse_int(std::string_view s, Int& out) {
  while (!s.empty() && (s.front() == ' ' || s.back() == '\r' || s.back() == ' ')) {
    if (s.front() == ' ') s.remove_prefix(1);
    else s.remove_suffix(1);
  }
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

/// Whitespace- or comma-separated list.
inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s + " ") {
    if (c == ' ' || c == ',' || c == '\t') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io_error, "cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::io_error, "cannot write " + p.string());
  out << text;
  out.flush();
  require(static_cast<bool>(out), ErrorCode::io_error, "write failed for " + p.string());
}

// ----------------------------------------------------------------- prices

enum class MissingPolicy { forward_fill, drop_row };

inline MissingPolicy parse_missing_policy(std::string_view s) {
  if (s == "forward_fill") return MissingPolicy::forward_fill;
  if (s == "drop_row") return MissingPolicy::drop_row;
  fail(ErrorCode::config_error, "missing must be forward_fill or drop_row, got '" +
                                    std::string(s) + "'");
}

constexpr std::string_view to_string(MissingPolicy m) noexcept {
  return m == MissingPolicy::forward_fill ? "forward_fill" : "drop_row";
}

struct PriceTable {
  std::vector<std::string> dates;  // ISO-8601 YYYY-MM-DD, strictly increasing
  std::vector<std::string> names;
  Matrix prices;                   // dates x names, positive

  int rows() const { return static_cast<int>(dates.size()); }
  int assets() const { return static_cast<int>(names.size()); }
};

/// Days since the epoch for a valid YYYY-MM-DD string, or nullopt.
inline std::optional<long> iso_day_number(const std::string& s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  int y = 0;
  unsigned m = 0, d = 0;
  if (!parse_int(std::string_view(s).substr(0, 4), y) ||
      !parse_int(std::string_view(s).substr(5, 2), m) ||
      !parse_int(std::string_view(s).substr(8, 2), d))
    return std::nullopt;
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m},
                                        std::chrono::day{d}};
  if (!ymd.ok()) return std::nullopt;
  return std::chrono::sys_days(ymd).time_since_epoch().count();
}

inline PriceTable parse_price_csv(const std::string& text,
                                  MissingPolicy policy = MissingPolicy::forward_fill) {
  std::vector<std::string> lines;
  {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
  }
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  require(!lines.empty(), ErrorCode::parse_error, "price file is empty");
  std::string header = lines[0];
  if (header.rfind("\xEF\xBB\xBF", 0) == 0) header.erase(0, 3);
  const auto cols = split(header, ',');
  require(cols.size() >= 2 && trim(cols[0]) == "date", ErrorCode::parse_error,
          "price header must be date,NAME1,...");
  PriceTable table;
  std::set<std::string> seen;
  for (std::size_t c = 1; c < cols.size(); ++c) {
    const std::string name = trim(cols[c]);
    require(!name.empty(), ErrorCode::parse_error, "empty series name in header");
    require(seen.insert(name).second, ErrorCode::parse_error, "duplicate series name " + name);
    table.names.push_back(name);
  }
  const auto k = table.names.size();
  std::vector<std::vector<double>> rows;
  std::vector<double> last(k, std::nan(""));
  std::optional<long> prev_day;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string where = " at row " + std::to_string(i + 1);
    const auto cells = split(lines[i], ',');
    require(cells.size() == k + 1, ErrorCode::parse_error,
            "expected " + std::to_string(k + 1) + " fields" + where);
    const std::string date = trim(cells[0]);
    const auto day = iso_day_number(date);
    require(day.has_value(), ErrorCode::parse_error, "unparseable date '" + date + "'" + where);
    require(!prev_day || *day > *prev_day, ErrorCode::parse_error,
            "dates must be strictly increasing" + where);
    prev_day = day;
    std::vector<double> row(k);
    bool missing = false;
    for (std::size_t j = 0; j < k; ++j) {
      const std::string cell = trim(cells[j + 1]);
      if (cell.empty()) {
        missing = true;
        row[j] = last[j];
        continue;
      }
      double v = 0.0;
      require(parse_double(cell, v), ErrorCode::parse_error,
              "unparseable price '" + cell + "'" + where);
      require(std::isfinite(v) && v > 0.0, ErrorCode::invalid_price,
              "non-positive price for " + table.names[j] + where);
      row[j] = v;
    }
    if (missing && policy == MissingPolicy::drop_row) continue;
    for (std::size_t j = 0; j < k; ++j) {
      require(!std::isnan(row[j]), ErrorCode::parse_error,
              "missing " + table.names[j] + " with nothing to forward-fill" + where);
      last[j] = row[j];
    }
    table.dates.push_back(date);
    rows.push_back(std::move(row));
  }
  table.prices.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < k; ++j)
      table.prices(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return table;
}

inline PriceTable load_price_csv(const std::filesystem::path& path,
                                 MissingPolicy policy = MissingPolicy::forward_fill) {
  return parse_price_csv(read_file(path), policy);
}

inline std::string format_price_csv(const PriceTable& t) {
  std::string out = "date";
  for (const auto& n : t.names) out += "," + n;
  out += "\n";
  for (int i = 0; i < t.rows(); ++i) {
    out += t.dates[i];
    for (int j = 0; j < t.assets(); ++j) out += "," + format_double(t.prices(i, j));
    out += "\n";
  }
  return out;
}

/// Consecutive calendar dates from 2000-01-03 for generated tables.
inline std::vector<std::string> synthetic_dates(int n) {
  using namespace std::chrono;
  std::vector<std::string> out;
  sys_days d = sys_days(year{2000} / January / day{3});
  for (int i = 0; i < n; ++i, d += days{1}) {
    const year_month_day ymd(d);
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    out.push_back(buf);
  }
  return out;
}

// ----------------------------------------------------------------- config

struct RunConfig {
  DdnmSpec forecast;
  BacktestConfig backtest;
  std::uint64_t seed = 0;
  std::string output_dir;
  std::string parents_file;  // optional parent table; empty selects from training data
  MissingPolicy missing = MissingPolicy::forward_fill;
  bool deterministic = false;

  void validate() const {
    backtest.validate();
    require(forecast.state_discount > 0.0 && forecast.state_discount <= 1.0,
            ErrorCode::config_error, "forecast.state_discount must lie in (0, 1]");
    require(forecast.vol_discount > 0.0 && forecast.vol_discount <= 1.0, ErrorCode::config_error,
            "forecast.vol_discount must lie in (0, 1]");
    require(forecast.prior_state_scale > 0.0, ErrorCode::config_error,
            "forecast.prior_state_scale must be > 0");
    require(forecast.prior_vol_shape > 0.0, ErrorCode::config_error,
            "forecast.prior_vol_shape must be > 0");
    require(forecast.paths >= 1, ErrorCode::config_error, "forecast.paths must be >= 1");
  }
};

namespace detail {

using boost::property_tree::ptree;

// Typed reader over a flat section -> key -> value tree that records the
// keys it consumed so leftovers can be rejected.
class ConfigReader {
 public:
  explicit ConfigReader(const ptree& tree) : tree_(tree) {}

  const ptree* section(const std::string& name) const {
    const auto it = tree_.find(name);
    return it == tree_.not_found() ? nullptr : &it->second;
  }

  std::optional<std::string> raw(const std::string& sec, const std::string& key) {
    used_.insert(sec + "." + key);
    const ptree* s = sec.empty() ? &tree_ : section(sec);
    if (!s) return std::nullopt;
    const auto it = s->find(key);
    if (it == s->not_found() || !it->second.empty()) return std::nullopt;
    return trim(it->second.data());
  }

  void number(const std::string& sec, const std::string& key, double& out) {
    if (auto v = raw(sec, key))
      require(parse_double(*v, out), ErrorCode::config_error, name(sec, key) + ": expected a number");
  }

  template <class Int>
  void integer(const std::string& sec, const std::string& key, Int& out) {
    if (auto v = raw(sec, key))
      require(parse_int(*v, out), ErrorCode::config_error,
              name(sec, key) + ": expected an integer");
  }

  void boolean(const std::string& sec, const std::string& key, bool& out) {
    if (auto v = raw(sec, key)) {
      require(*v == "true" || *v == "false", ErrorCode::config_error,
              name(sec, key) + ": expected true or false");
      out = *v == "true";
    }
  }

  void text(const std::string& sec, const std::string& key, std::string& out) {
    if (auto v = raw(sec, key)) out = *v;
  }

  /// Rejects any key that no reader call asked for.
  void reject_unknown(const std::set<std::string>& dynamic_sections) const {
    for (const auto& [sec, body] : tree_) {
      if (body.empty()) {
        require(used_.count("." + sec) > 0, ErrorCode::config_error,
                "unknown key '" + sec + "'");
        continue;
      }
      for (const auto& [key, value] : body) {
        (void)value;
        const std::string full = sec + "." + key;
        require(used_.count(full) > 0 || dynamic_sections.count(sec) > 0,
                ErrorCode::config_error, "unknown key '" + full + "'");
      }
    }
  }

  static std::string name(const std::string& sec, const std::string& key) {
    return sec.empty() ? key : sec + "." + key;
  }

 private:
  const ptree& tree_;
  std::set<std::string> used_;
};

inline void put(ptree& t, const std::string& path, const std::string& v) {
  t.put(ptree::path_type(path, '/'), v);
}

}  // namespace detail

/// Every configurable value as section -> key -> text; the inverse of
/// config_from_tree.
inline boost::property_tree::ptree config_to_tree(const RunConfig& c) {
  using detail::put;
  boost::property_tree::ptree t;
  const auto d = [](double x) { return format_double(x); };
  const auto& b = c.backtest;
  const auto& f = c.forecast;
  put(t, "run/seed", std::to_string(c.seed));
  put(t, "run/deterministic", c.deterministic ? "true" : "false");
  put(t, "run/threads", std::to_string(b.threads));
  if (!c.output_dir.empty()) put(t, "run/out", c.output_dir);
  put(t, "data/missing", std::string(to_string(c.missing)));
  put(t, "forecast/state_discount", d(f.state_discount));
  put(t, "forecast/vol_discount", d(f.vol_discount));
  put(t, "forecast/prior_state_mean", d(f.prior_state_mean));
  put(t, "forecast/prior_state_scale", d(f.prior_state_scale));
  put(t, "forecast/prior_vol_shape", d(f.prior_vol_shape));
  put(t, "forecast/paths", std::to_string(f.paths));
  put(t, "forecast/parent_threshold", d(b.parent_threshold));
  put(t, "forecast/training_days", std::to_string(b.training_days));
  if (!c.parents_file.empty()) put(t, "forecast/parents", c.parents_file);
  put(t, "portfolio/horizon", std::to_string(b.horizon));
  put(t, "portfolio/target", d(b.target));
  std::string costs;
  for (double x : b.costs) costs += (costs.empty() ? "" : " ") + d(x);
  put(t, "portfolio/costs", costs);
  put(t, "portfolio/max_days", std::to_string(b.max_days));
  put(t, "portfolio/sparsity_threshold", d(b.sparsity_threshold));
  for (const auto& s : b.strategies) {
    const std::string sec = "strategy." + s.name() + "/";
    put(t, sec + "kind", std::string(to_string(s.kind)));
    put(t, sec + "alpha", d(s.alpha));
    put(t, sec + "beta", d(s.beta));
    put(t, sec + "lambda", d(s.lambda));
    put(t, sec + "gamma", d(s.gamma));
  }
  put(t, "em/max_iters", std::to_string(b.em.max_iters));
  put(t, "em/tol", d(b.em.tol));
  put(t, "em/scale_floor", d(b.em.scale_floor));
  put(t, "em/squared_weight_estep", b.em.squared_weight_estep ? "true" : "false");
  put(t, "mcmc/iterations", std::to_string(b.mcmc.iterations));
  put(t, "mcmc/burn_in", std::to_string(b.mcmc.burn_in));
  put(t, "mcmc/thin", std::to_string(b.mcmc.thin));
  put(t, "mcmc/jitter", d(b.mcmc.jitter));
  put(t, "mcmc/chains", std::to_string(b.mcmc_chains));
  put(t, "mode/starts", std::to_string(b.mode_search.starts));
  put(t, "mode/max_iters", std::to_string(b.mode_search.max_iters));
  put(t, "mode/tol", d(b.mode_search.tol));
  put(t, "mode/dedupe_tol", d(b.mode_search.dedupe_tol));
  return t;
}

/// Reads a configuration tree. Shared loss weights live in [portfolio]
/// (alpha, beta, lambda, gamma, strategies = kind list); [strategy.LABEL]
/// sections define strategies individually and replace the list.
inline RunConfig config_from_tree(const boost::property_tree::ptree& tree) {
  detail::ConfigReader r(tree);
  RunConfig c;
  auto& b = c.backtest;
  auto& f = c.forecast;

  // keys also accepted at the top level, before any section
  r.integer("", "seed", c.seed);
  r.integer("run", "seed", c.seed);
  r.boolean("run", "deterministic", c.deterministic);
  r.integer("run", "threads", b.threads);
  r.text("run", "out", c.output_dir);
  if (auto v = r.raw("data", "missing")) c.missing = parse_missing_policy(*v);

  r.number("forecast", "state_discount", f.state_discount);
  r.number("forecast", "vol_discount", f.vol_discount);
  r.number("forecast", "prior_state_mean", f.prior_state_mean);
  r.number("forecast", "prior_state_scale", f.prior_state_scale);
  r.number("forecast", "prior_vol_shape", f.prior_vol_shape);
  r.integer("forecast", "paths", f.paths);
  r.number("forecast", "parent_threshold", b.parent_threshold);
  r.integer("forecast", "training_days", b.training_days);
  r.text("forecast", "parents", c.parents_file);

  r.integer("portfolio", "horizon", b.horizon);
  r.number("portfolio", "target", b.target);
  if (auto v = r.raw("portfolio", "costs")) {
    b.costs.clear();
    for (const auto& item : split_list(*v)) {
      double x = 0.0;
      require(parse_double(item, x), ErrorCode::config_error,
              "portfolio.costs: expected numbers, got '" + item + "'");
      b.costs.push_back(x);
    }
  }
  r.integer("portfolio", "max_days", b.max_days);
  r.number("portfolio", "sparsity_threshold", b.sparsity_threshold);
  StrategySpec shared;
  r.number("portfolio", "alpha", shared.alpha);
  r.number("portfolio", "beta", shared.beta);
  r.number("portfolio", "lambda", shared.lambda);
  r.number("portfolio", "gamma", shared.gamma);
  const bool gamma_given = r.raw("portfolio", "gamma").has_value();
  if (auto v = r.raw("portfolio", "strategies")) {
    b.strategies.clear();
    for (const auto& item : split_list(*v)) {
      StrategySpec s = shared;
      s.kind = parse_strategy(item);
      if (s.kind == StrategyKind::extended_laplace && !gamma_given) s.gamma = 100.0;
      b.strategies.push_back(s);
    }
  } else {
    for (auto& s : b.strategies) {
      const auto kind = s.kind;
      s = shared;
      s.kind = kind;
    }
  }

  std::set<std::string> strategy_sections;
  std::vector<StrategySpec> explicit_strategies;
  for (const auto& [sec, body] : tree) {
    if (sec.rfind("strategy.", 0) != 0 || body.empty()) continue;
    strategy_sections.insert(sec);
    StrategySpec s = shared;
    s.label = sec.substr(9);
    require(!s.label.empty(), ErrorCode::config_error, "empty strategy label");
    auto kind = r.raw(sec, "kind");
    require(kind.has_value(), ErrorCode::config_error, sec + ".kind is required");
    s.kind = parse_strategy(*kind);
    if (s.kind == StrategyKind::extended_laplace && !gamma_given) s.gamma = 100.0;
    r.number(sec, "alpha", s.alpha);
    r.number(sec, "beta", s.beta);
    r.number(sec, "lambda", s.lambda);
    r.number(sec, "gamma", s.gamma);
    for (const auto& [key, value] : body) {
      (void)value;
      require(key == "kind" || key == "alpha" || key == "beta" || key == "lambda" ||
                  key == "gamma",
              ErrorCode::config_error, "unknown key '" + sec + "." + key + "'");
    }
    explicit_strategies.push_back(s);
  }
  if (!explicit_strategies.empty()) {
    require(!r.raw("portfolio", "strategies"), ErrorCode::config_error,
            "use either portfolio.strategies or [strategy.*] sections, not both");
    b.strategies = explicit_strategies;
  }

  r.integer("em", "max_iters", b.em.max_iters);
  r.number("em", "tol", b.em.tol);
  r.number("em", "scale_floor", b.em.scale_floor);
  r.boolean("em", "squared_weight_estep", b.em.squared_weight_estep);
  r.integer("mcmc", "iterations", b.mcmc.iterations);
  r.integer("mcmc", "burn_in", b.mcmc.burn_in);
  r.integer("mcmc", "thin", b.mcmc.thin);
  r.number("mcmc", "jitter", b.mcmc.jitter);
  r.integer("mcmc", "chains", b.mcmc_chains);
  r.integer("mode", "starts", b.mode_search.starts);
  r.integer("mode", "max_iters", b.mode_search.max_iters);
  r.number("mode", "tol", b.mode_search.tol);
  r.number("mode", "dedupe_tol", b.mode_search.dedupe_tol);

  r.reject_unknown(strategy_sections);
  b.seed = c.seed;
  try {
    c.validate();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::config_error) throw;
    fail(ErrorCode::config_error, e.detail());
  }
  return c;
}

/// INI text with [section] headers and key = value lines; ';' or '#' start
/// comments. An empty text yields all defaults.
inline RunConfig parse_config_text(const std::string& text) {
  // property_tree only knows ';' comments
  std::string cleaned;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    cleaned += (t.rfind('#', 0) == 0 ? std::string() : line) + "\n";
  }
  boost::property_tree::ptree tree;
  std::istringstream ss(cleaned);
  try {
    boost::property_tree::ini_parser::read_ini(ss, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    fail(ErrorCode::config_error, "line " + std::to_string(e.line()) + ": " + e.message());
  }
  return config_from_tree(tree);
}

inline RunConfig parse_config(const std::filesystem::path& path) {
  return parse_config_text(read_file(path));
}

inline std::string format_config(const RunConfig& c) {
  std::ostringstream out;
  boost::property_tree::ini_parser::write_ini(out, config_to_tree(c));
  return out.str();
}

// ------------------------------------------------------------ manifests

inline nlohmann::ordered_json tree_to_json(const boost::property_tree::ptree& t) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [key, child] : t) {
    if (child.empty()) j[key] = child.data();
    else j[key] = tree_to_json(child);
  }
  return j;
}

inline boost::property_tree::ptree json_to_tree(const nlohmann::ordered_json& j) {
  boost::property_tree::ptree t;
  require(j.is_object(), ErrorCode::parse_error, "config object expected in manifest");
  for (const auto& [key, value] : j.items()) {
    if (value.is_object()) {
      t.add_child(boost::property_tree::ptree::path_type(key, '/'), json_to_tree(value));
    } else {
      require(value.is_string(), ErrorCode::parse_error, "manifest config values are strings");
      t.put(boost::property_tree::ptree::path_type(key, '/'), value.get<std::string>());
    }
  }
  return t;
}

struct ManifestInfo {
  std::string command;
  std::vector<std::string> names;
  std::vector<std::vector<int>> parents;
  std::vector<std::string> files;
  int days = 0;
  int failures = 0;
  std::string first_date, last_date;
};

inline std::string manifest_json(const RunConfig& c, const ManifestInfo& m) {
  nlohmann::ordered_json j;
  j["format"] = "emuport-manifest";
  j["version"] = kVersion;
  j["command"] = m.command;
  j["seed"] = std::to_string(c.seed);
  j["config"] = tree_to_json(config_to_tree(c));
  j["series"] = m.names;
  if (!m.parents.empty() && m.parents.size() == m.names.size())
    j["parents"] = format_parents(m.parents, m.names);
  j["days"] = m.days;
  j["failures"] = m.failures;
  if (!m.first_date.empty()) {
    j["first_decision_date"] = m.first_date;
    j["last_decision_date"] = m.last_date;
  }
  j["files"] = m.files;
  return j.dump(2) + "\n";
}

inline RunConfig config_from_manifest(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::parse_error, std::string("manifest: ") + e.what());
  }
  require(j.contains("config"), ErrorCode::parse_error, "manifest has no config");
  return config_from_tree(json_to_tree(j["config"]));
}

// ----------------------------------------------------------- result tables

/// Dates of the decisions: the price-row date at which each day is decided.
inline std::string record_date(const BacktestRecord& r, const std::vector<std::string>& dates) {
  return r.time >= 0 && r.time < static_cast<int>(dates.size()) ? dates[r.time]
                                                                 : std::to_string(r.time);
}

inline std::string results_header(const std::vector<std::string>& names) {
  std::string h = "date,day,time,strategy,delta";
  for (const auto& n : names) h += ",w_" + n;
  for (const auto& n : names) h += ",prev_" + n;
  h += ",growth,realized_return,turnover,cumulative,ruin,sd,bound,nonzero,changed,failed\n";
  return h;
}

/// One row per (day, strategy, delta).
inline std::string format_results_csv(const BacktestResult& res,
                                      const std::vector<std::string>& names,
                                      const std::vector<std::string>& dates) {
  std::string out = results_header(names);
  const auto d = [](double x) { return format_double(x); };
  for (const auto& r : res.records) {
    for (std::size_t c = 0; c < res.costs.size(); ++c) {
      out += record_date(r, dates) + "," + std::to_string(r.day) + "," +
             std::to_string(r.time) + "," + res.strategy_names[r.strategy] + "," +
             d(res.costs[c]);
      for (Eigen::Index j = 0; j < r.w.size(); ++j) out += "," + d(r.w(j));
      for (Eigen::Index j = 0; j < r.w_prev.size(); ++j) out += "," + d(r.w_prev(j));
      out += "," + d(r.growth) + "," + d(r.growth - 1.0) + "," + d(r.turnover) + "," +
             d(r.cumulative[c]) + "," + (r.ruin[c] ? "1" : "0") + "," + d(r.sd) + "," +
             d(r.bound) + "," + std::to_string(r.nonzero) + "," + std::to_string(r.changed) +
             "," + (r.failed ? "1" : "0") + "\n";
    }
  }
  return out;
}

struct LoadedResults {
  BacktestResult result;
  std::vector<std::string> names;
  std::vector<std::string> dates;  // indexed by the record time
};

/// Inverse of format_results_csv; cumulative values are recomputed and must
/// match the stored ones exactly.
inline LoadedResults parse_results_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::parse_error,
          "results file is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto head = split(line, ',');
  LoadedResults out;
  const std::size_t fixed = 5, tail = 10;
  require(head.size() >= fixed + tail && (head.size() - fixed - tail) % 2 == 0 &&
              head[0] == "date" && head[3] == "strategy",
          ErrorCode::parse_error, "not a results table header");
  const std::size_t k = (head.size() - fixed - tail) / 2;
  for (std::size_t j = 0; j < k; ++j) out.names.push_back(head[fixed + j].substr(2));
  require(line + "\n" == results_header(out.names), ErrorCode::parse_error,
          "results header does not match the expected columns");
  auto& res = out.result;
  std::map<std::pair<int, std::string>, std::size_t> index;  // (day, strategy) -> record
  std::map<int, std::string> date_of;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto cells = split(line, ',');
    const std::string where = " at row " + std::to_string(row);
    require(cells.size() == head.size(), ErrorCode::parse_error, "field count" + where);
    const auto num = [&](std::size_t i) {
      double v = 0.0;
      require(parse_double(cells[i], v), ErrorCode::parse_error, "bad number" + where);
      return v;
    };
    const auto integer = [&](std::size_t i) {
      int v = 0;
      require(parse_int(cells[i], v), ErrorCode::parse_error, "bad integer" + where);
      return v;
    };
    const int day = integer(1);
    const std::string strat = cells[3];
    const double delta = num(4);
    auto sit = std::find(res.strategy_names.begin(), res.strategy_names.end(), strat);
    if (sit == res.strategy_names.end()) {
      res.strategy_names.push_back(strat);
      sit = res.strategy_names.end() - 1;
    }
    auto cit = std::find(res.costs.begin(), res.costs.end(), delta);
    if (cit == res.costs.end()) {
      res.costs.push_back(delta);
      cit = res.costs.end() - 1;
    }
    const auto ci = static_cast<std::size_t>(cit - res.costs.begin());
    const auto key = std::make_pair(day, strat);
    auto it = index.find(key);
    if (it == index.end()) {
      BacktestRecord r;
      r.day = day;
      r.time = integer(2);
      r.strategy = static_cast<std::size_t>(sit - res.strategy_names.begin());
      r.w.resize(static_cast<Eigen::Index>(k));
      r.w_prev.resize(static_cast<Eigen::Index>(k));
      for (std::size_t j = 0; j < k; ++j) {
        r.w(static_cast<Eigen::Index>(j)) = num(fixed + j);
        r.w_prev(static_cast<Eigen::Index>(j)) = num(fixed + k + j);
      }
      const std::size_t b = fixed + 2 * k;
      r.growth = num(b);
      r.turnover = num(b + 2);
      r.sd = num(b + 5);
      r.bound = num(b + 6);
      r.nonzero = integer(b + 7);
      r.changed = integer(b + 8);
      r.failed = cells[b + 9] == "1";
      date_of[r.time] = cells[0];
      res.records.push_back(std::move(r));
      it = index.emplace(key, res.records.size() - 1).first;
    }
    auto& r = res.records[it->second];
    const std::size_t b = fixed + 2 * k;
    if (r.cumulative.size() <= ci) {
      r.cumulative.resize(ci + 1, std::nan(""));
      r.ruin.resize(ci + 1, false);
    }
    r.cumulative[ci] = num(b + 3);
    r.ruin[ci] = cells[b + 4] == "1";
  }
  int max_day = -1;
  for (const auto& r : res.records) {
    require(r.cumulative.size() == res.costs.size(), ErrorCode::parse_error,
            "every record needs one row per cost");
    max_day = std::max(max_day, r.day);
    res.failures += r.failed ? 1 : 0;
  }
  res.days = max_day + 1;
  for (std::size_t s = 0; s < res.strategy_names.size(); ++s) {
    const auto recs = res.strategy_records(s);
    for (std::size_t c = 0; c < res.costs.size(); ++c) {
      const auto cum = cumulative_returns(recs, res.costs[c]);
      for (std::size_t i = 0; i < recs.size(); ++i)
        require(cum[i] == recs[i]->cumulative[c], ErrorCode::parse_error,
                "stored cumulative return disagrees with the recomputed product for " +
                    res.strategy_names[s]);
    }
  }
  if (!date_of.empty()) {
    out.dates.resize(static_cast<std::size_t>(date_of.rbegin()->first) + 1);
    for (const auto& [t, d] : date_of) out.dates[static_cast<std::size_t>(t)] = d;
  }
  return out;
}

// ---------------------------------------------------------------- reports

inline const std::vector<std::string>& report_files() {
  static const std::vector<std::string> files{"results.csv", "weights.csv", "cumulative.csv",
                                              "sd.csv", "nonzero.csv"};
  return files;
}

/// Writes the plot-ready tables into out_dir and returns their names.
inline std::vector<std::string> emit_report(const BacktestResult& res,
                                            const std::vector<std::string>& names,
                                            const std::vector<std::string>& dates,
                                            const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(std::filesystem::is_directory(out_dir), ErrorCode::io_error,
          "cannot create output directory " + out_dir.string());
  const auto d = [](double x) { return format_double(x); };
  std::string weights = "date,day,strategy";
  for (const auto& n : names) weights += "," + n;
  weights += "\n";
  std::string cumulative = "date,day,strategy,delta,cumulative,ruin\n";
  std::string sd = "date,day,strategy,sd,bound\n";
  std::string nonzero = "date,day,strategy,nonzero,changed\n";
  for (const auto& r : res.records) {
    const std::string lead =
        record_date(r, dates) + "," + std::to_string(r.day) + "," + res.strategy_names[r.strategy];
    weights += lead;
    for (Eigen::Index j = 0; j < r.w.size(); ++j) weights += "," + d(r.w(j));
    weights += "\n";
    for (std::size_t c = 0; c < res.costs.size(); ++c)
      cumulative += lead + "," + d(res.costs[c]) + "," + d(r.cumulative[c]) + "," +
                    (r.ruin[c] ? "1" : "0") + "\n";
    sd += lead + "," + d(r.sd) + "," + d(r.bound) + "\n";
    nonzero += lead + "," + std::to_string(r.nonzero) + "," + std::to_string(r.changed) + "\n";
  }
  write_file(out_dir / "results.csv", format_results_csv(res, names, dates));
  write_file(out_dir / "weights.csv", weights);
  write_file(out_dir / "cumulative.csv", cumulative);
  write_file(out_dir / "sd.csv", sd);
  write_file(out_dir / "nonzero.csv", nonzero);
  return report_files();
}

// ---------------------------------------------------------------- moments

/// {"mean": [[...], ...], "covariance" | "precision": [[[...]]], "w0": [...]}
/// with one entry per horizon step.
struct MomentsFile {
  ForecastMoments moments;
  std::optional<Vector> w0;
};

inline MomentsFile parse_moments_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::parse_error, std::string("moments: ") + e.what());
  }
  const auto vec = [](const nlohmann::json& a, const std::string& what) {
    require(a.is_array(), ErrorCode::parse_error, what + " must be an array");
    Vector v(static_cast<Eigen::Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i) {
      require(a[i].is_number(), ErrorCode::parse_error, what + " entries must be numbers");
      v(static_cast<Eigen::Index>(i)) = a[i].get<double>();
    }
    return v;
  };
  MomentsFile out;
  require(j.is_object() && j.contains("mean"), ErrorCode::parse_error, "moments need 'mean'");
  const bool has_cov = j.contains("covariance"), has_prec = j.contains("precision");
  require(has_cov != has_prec, ErrorCode::parse_error,
          "moments need exactly one of 'covariance' or 'precision'");
  const auto& mats = has_cov ? j["covariance"] : j["precision"];
  require(j["mean"].is_array() && mats.is_array() && j["mean"].size() == mats.size(),
          ErrorCode::parse_error, "moments: one mean and one matrix per step");
  for (std::size_t t = 0; t < mats.size(); ++t) {
    const Vector f = vec(j["mean"][t], "mean");
    const auto k = f.size();
    require(mats[t].is_array() && static_cast<Eigen::Index>(mats[t].size()) == k,
            ErrorCode::parse_error, "moments matrix dimension at step " + std::to_string(t + 1));
    Matrix m(k, k);
    for (Eigen::Index r = 0; r < k; ++r) {
      const Vector row = vec(mats[t][static_cast<std::size_t>(r)], "matrix row");
      require(row.size() == k, ErrorCode::parse_error, "moments matrices must be square");
      m.row(r) = row.transpose();
    }
    require_symmetric(m, "moments matrix");
    if (has_cov) {
      const Eigen::LLT<Matrix> llt(m);
      require(llt.info() == Eigen::Success, ErrorCode::invalid_covariance,
              "covariance at step " + std::to_string(t + 1) + " is not positive definite");
      m = symmetrize(llt.solve(Matrix::Identity(k, k)));
    }
    out.moments.mean.push_back(f);
    out.moments.precision.push_back(m);
  }
  if (j.contains("w0")) out.w0 = vec(j["w0"], "w0");
  out.moments.validate();
  return out;
}

// ------------------------------------------------------------------- lock

/// Exclusive ownership of an output directory through a lock file created
/// with O_EXCL semantics; removed on destruction.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir) : path_(dir / ".emuport.lock") {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    require(std::filesystem::is_directory(dir), ErrorCode::io_error,
            "cannot create output directory " + dir.string());
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    require(f != nullptr, ErrorCode::io_error,
            "output directory is locked (" + path_.string() + " exists)");
    std::fclose(f);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;
  ~OutputLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }

 private:
  std::filesystem::path path_;
};

}  // namespace emuport

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace emuport {

enum class ErrorCode {
  invalid_covariance,
  shape_error,
  invalid_spec,
  degenerate_constraint,
  invalid_parameter,
  flat_region,
  infeasible_target,
  insufficient_data,
  degenerate_forecast,
  invalid_price,
  parse_error,
  config_error,
  io_error,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::invalid_covariance: return "invalid covariance";
    case ErrorCode::shape_error: return "shape error";
    case ErrorCode::invalid_spec: return "invalid spec";
    case ErrorCode::degenerate_constraint: return "degenerate constraint";
    case ErrorCode::invalid_parameter: return "invalid parameter";
    case ErrorCode::flat_region: return "flat region";
    case ErrorCode::infeasible_target: return "infeasible target";
    case ErrorCode::insufficient_data: return "insufficient data";
    case ErrorCode::degenerate_forecast: return "degenerate forecast";
    case ErrorCode::invalid_price: return "invalid price";
    case ErrorCode::parse_error: return "parse error";
    case ErrorCode::config_error: return "config error";
    case ErrorCode::io_error: return "io error";
  }
  return "unknown";
}

// Every failure raised by the library carries one of the codes above; the
// message text starts with the code name so plain what() output is greppable.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail),
        code_(code),
        detail_(detail) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& detail) {
  throw Error(code, detail);
}

inline void require(bool ok, ErrorCode code, const std::string& detail) {
  if (!ok) fail(code, detail);
}

}  // namespace emuport

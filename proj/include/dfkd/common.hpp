#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace dfkd {

namespace detail {

[[noreturn]] inline void throw_invalid(const char* expr, const std::string& msg) {
  std::ostringstream os;
  os << msg << " (failed: " << expr << ")";
  throw std::invalid_argument(os.str());
}

}  // namespace detail

// Contract checks on public surfaces. Violations are caller errors.
#define DFKD_CHECK(cond, msg)                                  \
  do {                                                         \
    if (!(cond)) {                                             \
      std::ostringstream dfkd_os_;                             \
      dfkd_os_ << msg;                                         \
      ::dfkd::detail::throw_invalid(#cond, dfkd_os_.str());    \
    }                                                          \
  } while (0)

// Runtime failures (I/O, numeric divergence, corrupt artifacts).
#define DFKD_FAIL(msg)                    \
  do {                                    \
    std::ostringstream dfkd_os_;          \
    dfkd_os_ << msg;                      \
    throw std::runtime_error(dfkd_os_.str()); \
  } while (0)

#define DFKD_REQUIRE(cond, msg) \
  do {                          \
    if (!(cond)) DFKD_FAIL(msg); \
  } while (0)

}  // namespace dfkd

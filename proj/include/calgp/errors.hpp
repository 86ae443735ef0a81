#pragma once

#include <stdexcept>
#include <string>

namespace calgp {

// Error taxonomy mirrored by the CLI exit codes: config/usage problems,
// numeric failures (divergence, non-finite values), and I/O failures.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace calgp

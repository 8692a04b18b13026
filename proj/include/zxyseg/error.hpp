#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace zxyseg {

// Runtime failure carrying a stable machine-readable code such as
// "io.size_mismatch" or "config.invalid". The CLI turns these into
// JSON error objects on stderr.
class Error : public std::runtime_error {
public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

private:
  std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, const std::string& code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace zxyseg

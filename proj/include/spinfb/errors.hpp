#pragma once

#include <atomic>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

namespace spinfb {

// Precondition on a numeric argument or data length was violated.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Invalid configuration. `field()` names the offending key as "section.key"
// when it is known.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& msg, std::string field = {})
      : std::invalid_argument(field.empty() ? msg : field + ": " + msg),
        field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class FitError : public std::runtime_error {
 public:
  FitError(const std::string& msg, std::string diagnostics)
      : std::runtime_error(msg), diagnostics_(std::move(diagnostics)) {}
  const std::string& diagnostics() const noexcept { return diagnostics_; }

 private:
  std::string diagnostics_;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using WarningHandler = void (*)(std::string_view);

namespace detail {
inline void stderr_warning(std::string_view msg) {
  std::fprintf(stderr, "spinfb: warning: %.*s\n", static_cast<int>(msg.size()), msg.data());
}
inline std::atomic<WarningHandler>& warning_slot() {
  static std::atomic<WarningHandler> handler{&stderr_warning};
  return handler;
}
}  // namespace detail

// Installs a process-wide sink for non-fatal diagnostics and returns the
// previous one. Passing nullptr silences warnings.
inline WarningHandler set_warning_handler(WarningHandler h) {
  return detail::warning_slot().exchange(h);
}

inline void warn(std::string_view msg) {
  if (auto h = detail::warning_slot().load()) h(msg);
}

// Swaps the handler for the lifetime of the guard.
class ScopedWarningHandler {
 public:
  explicit ScopedWarningHandler(WarningHandler h) : previous_(set_warning_handler(h)) {}
  ~ScopedWarningHandler() { set_warning_handler(previous_); }
  ScopedWarningHandler(const ScopedWarningHandler&) = delete;
  ScopedWarningHandler& operator=(const ScopedWarningHandler&) = delete;

 private:
  WarningHandler previous_;
};

}  // namespace spinfb

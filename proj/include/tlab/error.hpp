#pragma once

#include <stdexcept>
#include <string>

namespace tlab {

// Bad run configuration (invalid key, inconsistent dimensions, kind/flag
// combinations). CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Bad data fed to a validly configured component (out-of-vocab id,
// overlength sequence, unreadable corpus).
struct InputError : std::runtime_error {
  explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

// Training produced a non-finite loss. Message names the offending step.
// CLI maps this to exit code 3.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace tlab

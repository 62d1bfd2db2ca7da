#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace tlab {

// Deterministic random stream used everywhere randomness is needed.
// std::mt19937_64 state transitions are fully specified by the standard;
// the helpers below avoid std::*_distribution, whose output sequences are
// implementation-defined and would break run-to-run reproducibility across
// toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
  }

  // Uniform integer in [0, n). n must be positive.
  uint64_t below(uint64_t n);

  // Standard normal via Box-Muller with one cached spare.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Normal(0, stddev) redrawn until |x| <= bound * stddev.
  double truncated_normal(double stddev, double bound = 3.0);

  std::string save_state() const;
  void load_state(const std::string& s);

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tlab

#include "tlab/rng.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace tlab {

uint64_t Rng::below(uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
  // Rejection sampling keeps the result exactly uniform.
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t v = gen_();
  while (v >= limit) v = gen_();
  return v % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller; 1 - uniform() keeps the argument of log strictly positive.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double Rng::truncated_normal(double stddev, double bound) {
  const double cap = bound * stddev;
  double v = normal() * stddev;
  while (std::abs(v) > cap) v = normal() * stddev;
  return v;
}

std::string Rng::save_state() const {
  std::ostringstream os;
  os << gen_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
  // The spare is serialized via its bit pattern so reload is exact.
  union {
    double d;
    uint64_t u;
  } bits;
  bits.d = spare_;
  os << bits.u;
  return os.str();
}

void Rng::load_state(const std::string& s) {
  std::istringstream is(s);
  is >> gen_;
  int flag = 0;
  uint64_t u = 0;
  is >> flag >> u;
  if (is.fail()) throw std::runtime_error("Rng::load_state: malformed state string");
  has_spare_ = flag != 0;
  union {
    double d;
    uint64_t u;
  } bits;
  bits.u = u;
  spare_ = bits.d;
}

}  // namespace tlab

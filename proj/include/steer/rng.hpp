#ifndef STEER_RNG_HPP_
#define STEER_RNG_HPP_

#include <cstdint>
#include <random>
#include <span>

namespace steer {

// Seeded generator with platform-independent derived distributions, so a
// seed reproduces the same run wherever the binary is built.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t next() { return engine_(); }
  // Index < n, by rejection to avoid modulo bias.
  std::uint64_t below(std::uint64_t n);
  // Draw from unnormalised non-negative weights.
  std::size_t categorical(std::span<const double> probs);

 private:
  std::mt19937_64 engine_;
};

}  // namespace steer

#endif  // STEER_RNG_HPP_

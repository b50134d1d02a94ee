#pragma once

// Deterministic random source. All variates are derived from raw mt19937
// words with fixed arithmetic, so sequences are identical across platforms
// and standard-library versions (std::*_distribution makes no such promise).

#include <cstdint>
#include <random>
#include <vector>

namespace xald {

class Rng {
public:
  explicit Rng(uint64_t seed) : engine_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

  uint32_t next_u32() { return engine_(); }

  // uniform on (0,1); never returns an exact endpoint
  double uniform();
  double uniform(double lo, double hi);
  // unbiased-enough integer in [0, n)
  int uniform_int(int n);

  double normal();  // standard normal, Box-Muller with cached twin

  // Marsaglia-Tsang for shape >= 1, boosted by u^(1/shape) below 1.
  double gamma(double shape);
  // symmetric Beta(alpha, alpha) in [0,1]
  double beta_symmetric(double alpha);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // splitmix64 mixing for decorrelated child seeds
  static uint64_t derive(uint64_t base, uint64_t stream, uint64_t index = 0);

private:
  std::mt19937 engine_;
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace xald

#ifndef AUGFPN_RNG_HPP
#define AUGFPN_RNG_HPP

#include <cstdint>

#include "augfpn/tensor.hpp"

namespace augfpn {

/// splitmix64 step; used to expand seeds and derive per-scene substreams.
std::uint64_t splitmix64(std::uint64_t& state);

/// xoshiro256** generator. Byte-identical streams for a given seed on any
/// platform (no std::*_distribution involved anywhere).
class Xoshiro256 {
 public:
  explicit Xoshiro256(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform double in [0,1) with 53 random bits.
  double next_double();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller (consumes two uniforms).
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n);

 private:
  std::uint64_t s_[4];
};

/// Kaiming-uniform fan-in fill, U(-sqrt(6/fan_in), +sqrt(6/fan_in)): the
/// ReLU-gain variant, for layers feeding a ReLU.
template <typename T>
void fill_kaiming_uniform(Tensor<T>& t, std::int64_t fan_in, Xoshiro256& rng);

/// Gain-1 variant, U(-sqrt(3/fan_in), +sqrt(3/fan_in)): variance-preserving
/// for layers with no activation after them (lateral/output convs).
template <typename T>
void fill_linear_uniform(Tensor<T>& t, std::int64_t fan_in, Xoshiro256& rng);

template <typename T>
void fill_uniform(Tensor<T>& t, double lo, double hi, Xoshiro256& rng);

}  // namespace augfpn

#endif  // AUGFPN_RNG_HPP

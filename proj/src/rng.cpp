#include "augfpn/rng.hpp"

#include <cmath>

namespace augfpn {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {
inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}

Xoshiro256::Xoshiro256(std::uint64_t seed) {
  std::uint64_t sm = seed;
  for (auto& s : s_) s = splitmix64(sm);
}

std::uint64_t Xoshiro256::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Xoshiro256::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Xoshiro256::uniform(double lo, double hi) {
  return lo + (hi - lo) * next_double();
}

double Xoshiro256::normal() {
  // Box-Muller; guard the log against a zero uniform.
  double u1 = next_double();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  const double u2 = next_double();
  const double r = std::sqrt(-2.0 * std::log(u1));
  return r * std::cos(2.0 * M_PI * u2);
}

std::uint64_t Xoshiro256::next_below(std::uint64_t n) {
  return n ? next_u64() % n : 0;
}

template <typename T>
void fill_kaiming_uniform(Tensor<T>& t, std::int64_t fan_in, Xoshiro256& rng) {
  if (fan_in <= 0) throw ConfigError("fill_kaiming_uniform: fan_in must be positive");
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void fill_linear_uniform(Tensor<T>& t, std::int64_t fan_in, Xoshiro256& rng) {
  if (fan_in <= 0) throw ConfigError("fill_linear_uniform: fan_in must be positive");
  const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void fill_uniform(Tensor<T>& t, double lo, double hi, Xoshiro256& rng) {
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
}

template void fill_kaiming_uniform<float>(Tensor<float>&, std::int64_t, Xoshiro256&);
template void fill_kaiming_uniform<double>(Tensor<double>&, std::int64_t, Xoshiro256&);
template void fill_linear_uniform<float>(Tensor<float>&, std::int64_t, Xoshiro256&);
template void fill_linear_uniform<double>(Tensor<double>&, std::int64_t, Xoshiro256&);
template void fill_uniform<float>(Tensor<float>&, double, double, Xoshiro256&);
template void fill_uniform<double>(Tensor<double>&, double, double, Xoshiro256&);

}  // namespace augfpn

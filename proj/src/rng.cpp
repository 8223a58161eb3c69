#include "lsttta/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace lsttta {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

double to_unit(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}
}  // namespace

std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ull;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 31;
  return x;
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

RngKey RngKey::from_seed(std::uint64_t seed) { return RngKey(mix64(seed + kGolden)); }

RngKey RngKey::derive(std::string_view label, std::uint64_t index) const {
  return RngKey(mix64(mix64(state_ ^ fnv1a64(label)) + (index + 1) * kGolden));
}

std::uint64_t RngKey::bits(std::uint64_t counter) const {
  return mix64(state_ + (counter + 1) * kGolden);
}

std::vector<double> uniform(const RngKey& key, std::size_t n) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = to_unit(key.bits(i));
  return out;
}

std::vector<double> gaussian(const RngKey& key, std::size_t n) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; i += 2) {
    // 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - to_unit(key.bits(i));
    const double u2 = to_unit(key.bits(i + 1));
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    out[i] = r * std::cos(theta);
    if (i + 1 < n) out[i + 1] = r * std::sin(theta);
  }
  return out;
}

std::vector<double> bernoulli_mask(const RngKey& key, std::size_t n, double p) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("dropout rate must lie in [0, 1)");
  }
  const double keep = 1.0 / (1.0 - p);
  std::vector<double> out(n, 1.0);
  if (p == 0.0) return out;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = to_unit(key.bits(i)) < p ? 0.0 : keep;
  }
  return out;
}

}  // namespace lsttta

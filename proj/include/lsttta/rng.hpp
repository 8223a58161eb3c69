#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace lsttta {

// Counter-based, splittable randomness.
//
// A key is a 64-bit state. derive() folds a (label, index) pair into it:
//   state' = mix(mix(state ^ fnv1a64(label)) + (index + 1) * 0x9E3779B97F4A7C15)
// where mix is the SplitMix64 finalizer. Draw i of a key is
//   mix(state + (i + 1) * 0x9E3779B97F4A7C15)
// and uniforms take the top 53 bits. There is no hidden state, so any
// consumer holding the same key path sees the same stream.
class RngKey {
 public:
  constexpr RngKey() = default;
  explicit constexpr RngKey(std::uint64_t state) : state_(state) {}

  static RngKey from_seed(std::uint64_t seed);

  RngKey derive(std::string_view label, std::uint64_t index = 0) const;

  /// The counter-th raw 64-bit draw of this key's stream.
  std::uint64_t bits(std::uint64_t counter) const;

  std::uint64_t state() const { return state_; }

  friend bool operator==(const RngKey&, const RngKey&) = default;

 private:
  std::uint64_t state_ = 0;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view s);

/// n draws in [0, 1).
std::vector<double> uniform(const RngKey& key, std::size_t n);

/// n standard normals via Box-Muller on consecutive uniform pairs.
std::vector<double> gaussian(const RngKey& key, std::size_t n);

/// n inverted-dropout mask values: 0 with probability p, else 1/(1-p).
/// Throws std::invalid_argument unless 0 <= p < 1.
std::vector<double> bernoulli_mask(const RngKey& key, std::size_t n, double p);

}  // namespace lsttta

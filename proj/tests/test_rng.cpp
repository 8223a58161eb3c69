#include <stdexcept>
#include <cmath>
#include <set>

#include "doctest.h"
#include "lsttta/rng.hpp"

using namespace lsttta;

TEST_SUITE("rng") {
  TEST_CASE("same key gives the same stream") {
    const RngKey k = RngKey::from_seed(42).derive("dropout", 3);
    CHECK(uniform(k, 100) == uniform(k, 100));
    CHECK(gaussian(k, 101) == gaussian(k, 101));
    CHECK(bernoulli_mask(k, 64, 0.3) == bernoulli_mask(k, 64, 0.3));
    CHECK(RngKey::from_seed(42).derive("dropout", 3) == k);
  }

  TEST_CASE("prefix stability: longer draws extend shorter ones") {
    const RngKey k = RngKey::from_seed(1);
    const auto a = uniform(k, 10);
    const auto b = uniform(k, 20);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }

  TEST_CASE("distinct label paths give distinct streams") {
    const RngKey root = RngKey::from_seed(7);
    std::set<std::uint64_t> firsts;
    for (std::uint64_t i = 0; i < 200; ++i) {
      firsts.insert(root.derive("a", i).bits(0));
      firsts.insert(root.derive("b", i).bits(0));
    }
    CHECK(firsts.size() == 400);
    CHECK(root.derive("x").derive("y") != root.derive("y").derive("x"));
  }

  TEST_CASE("streams of sibling keys are uncorrelated") {
    const RngKey root = RngKey::from_seed(3);
    const std::size_t n = 100000;
    const auto a = uniform(root.derive("s", 0), n);
    const auto b = uniform(root.derive("s", 1), n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sab += (a[i] - 0.5) * (b[i] - 0.5);
      saa += (a[i] - 0.5) * (a[i] - 0.5);
      sbb += (b[i] - 0.5) * (b[i] - 0.5);
    }
    // |r| < 4/sqrt(n) is a ~4-sigma bound under independence.
    CHECK(std::abs(sab / std::sqrt(saa * sbb)) < 4.0 / std::sqrt(static_cast<double>(n)));
  }

  TEST_CASE("uniform range") {
    for (double u : uniform(RngKey::from_seed(9), 10000)) {
      CHECK(u >= 0.0);
      CHECK(u < 1.0);
    }
  }

  TEST_CASE("gaussian moments within 3 sigma") {
    const std::size_t n = 100000;
    const auto g = gaussian(RngKey::from_seed(5), n);
    double m = 0.0;
    for (double v : g) m += v;
    m /= n;
    double var = 0.0;
    for (double v : g) var += (v - m) * (v - m);
    var /= (n - 1);
    // sd(mean) = 1/sqrt(n); sd(sample var) = sqrt(2/(n-1)) for normals.
    CHECK(std::abs(m) < 3.0 / std::sqrt(static_cast<double>(n)));
    CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / (n - 1)));
  }

  TEST_CASE("bernoulli mask") {
    CHECK(bernoulli_mask(RngKey::from_seed(1), 50, 0.0) == std::vector<double>(50, 1.0));
    const std::size_t n = 100000;
    const auto m = bernoulli_mask(RngKey::from_seed(2), n, 0.1);
    std::size_t zeros = 0;
    for (double v : m) {
      CHECK((v == 0.0 || v == 1.0 / 0.9));
      zeros += v == 0.0;
    }
    CHECK(std::abs(static_cast<double>(zeros) / n - 0.1) < 0.01);
    CHECK_THROWS_AS(bernoulli_mask(RngKey(), 1, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(bernoulli_mask(RngKey(), 1, -0.1), std::invalid_argument);
  }
}

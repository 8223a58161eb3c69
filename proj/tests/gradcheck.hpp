#pragma once

#include <functional>
#include <random>
#include <vector>

#include "lsttta/autodiff.hpp"
#include "oracles.hpp"

namespace gradcheck {

using lsttta::ad::Shape;
using lsttta::ad::Tape;
using lsttta::ad::Var;

/// Builds a scalar loss from gradient-carrying leaves.
using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Reduces a tensor to a scalar with fixed random weights so every output
/// element contributes a distinct upstream gradient.
inline Var project(Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = oracle::random_vector(rng, out.value().size(), 0.5, 1.5);
  Var c = out.tape().constant(out.shape(), std::move(w));
  return lsttta::ad::reduce_mean(lsttta::ad::mul(out, c));
}

/// Largest floored relative error between tape gradients and central
/// differences (h = 1e-5) over all leaf entries.
inline double max_error(const Builder& build, const std::vector<Shape>& shapes,
                        const std::vector<std::vector<double>>& values, double h = 1e-5) {
  Tape tape;
  std::vector<Var> leaves;
  for (std::size_t i = 0; i < shapes.size(); ++i) leaves.push_back(tape.input(shapes[i], values[i]));
  Var loss = build(tape, leaves);
  tape.backward(loss);
  double worst = 0.0;
  for (std::size_t j = 0; j < shapes.size(); ++j) {
    const auto analytic = oracle::to_vec(tape.grad(leaves[j]));
    auto f = [&](const std::vector<double>& xj) {
      Tape t;
      std::vector<Var> ls;
      for (std::size_t i = 0; i < shapes.size(); ++i) {
        ls.push_back(t.input(shapes[i], i == j ? xj : values[i]));
      }
      return build(t, ls).item();
    };
    const auto numeric = oracle::finite_difference(f, values[j], h);
    for (std::size_t k = 0; k < numeric.size(); ++k) {
      worst = std::max(worst, oracle::rel_err(analytic[k], numeric[k]));
    }
  }
  return worst;
}

/// Rejects entries within `margin` of a kink at zero by nudging them away.
inline std::vector<double> away_from_zero(std::vector<double> v, double margin = 1e-3) {
  for (double& x : v) {
    if (std::abs(x) < margin) x = x < 0 ? -margin - std::abs(x) : margin + x;
  }
  return v;
}

}  // namespace gradcheck

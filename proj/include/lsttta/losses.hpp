#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "lsttta/autodiff.hpp"
#include "lsttta/grid.hpp"

namespace lsttta {

/// Weights of the uncertainty, LULC-consistency and bias terms.
struct LossWeights {
  double lambda1 = 0.65;
  double lambda2 = 0.30;
  double lambda3 = 0.25;

  /// Throws std::invalid_argument unless all three are finite and >= 0.
  void validate() const;

  /// lambda1 * uncertainty + lambda2 * lulc + lambda3 * bias.
  double combine(double uncertainty, double lulc, double bias) const;
};

/// Evaluated terms of one adaptation loss.
struct LossBreakdown {
  double uncertainty = 0.0;  // K^2
  double lulc = 0.0;         // in [0, 1]
  double bias = 0.0;         // K
  double total = 0.0;
  std::size_t degenerate_rho_count = 0;
};

/// Mean per-pixel unbiased variance over the MC passes.
ad::Var uncertainty_loss(std::span<const ad::Var> predictions);

struct LulcLoss {
  ad::Var loss;
  std::size_t degenerate_rho_count = 0;
};

/// (1/3) sum_k (1 - |rho_k|) between the prediction (1, H, W) and each index
/// layer of `indices` (3, H, W). Constant arguments give rho = 0.
LulcLoss lulc_loss(ad::Var y_hat, ad::Var indices);

/// |mean(y_hat) - mean(x_coarse)|, each mean over its own lattice.
ad::Var bias_loss(ad::Var y_hat, const Grid& x_coarse);

struct TtaLoss {
  ad::Var total;
  LossBreakdown breakdown;
};

/// Weighted sum of the three terms. The variance term consumes the MC set,
/// the LULC and bias terms consume the MC mean prediction.
TtaLoss tta_loss(std::span<const ad::Var> predictions, ad::Var indices,
                 const Grid& x_coarse, const LossWeights& weights);

/// Termwise mean over samples; degenerate counts are summed.
LossBreakdown mean_breakdown(std::span<const LossBreakdown> rows);

/// CSV row: epoch,patch_id,uncertainty,lulc,bias,total,degenerate_rho_count
std::string breakdown_csv_header();
std::string breakdown_csv_row(std::size_t epoch, std::size_t patch_id,
                              const LossBreakdown& b);

/// Shortest round-trip decimal text for a double.
std::string format_double(double v);

}  // namespace lsttta

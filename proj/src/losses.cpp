#include "lsttta/losses.hpp"

#include <charconv>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace lsttta {

void LossWeights::validate() const {
  for (double l : {lambda1, lambda2, lambda3}) {
    if (!std::isfinite(l) || l < 0.0) {
      throw std::invalid_argument("loss weights must be finite and non-negative");
    }
  }
}

double LossWeights::combine(double uncertainty, double lulc, double bias) const {
  return lambda1 * uncertainty + lambda2 * lulc + lambda3 * bias;
}

ad::Var uncertainty_loss(std::span<const ad::Var> predictions) {
  if (predictions.size() < 2) {
    throw ad::AutodiffError("uncertainty loss needs at least 2 MC passes");
  }
  return ad::reduce_mean(ad::sample_variance_over_set(predictions));
}

LulcLoss lulc_loss(ad::Var y_hat, ad::Var indices) {
  const auto& ys = y_hat.shape();
  const auto& is = indices.shape();
  if (ys.rank() != 3 || is.rank() != 3 || ys[0] != 1 || is[0] != 3 || ys[1] != is[1] ||
      ys[2] != is[2]) {
    throw ad::AutodiffError("lulc_loss: expected (1,H,W) and (3,H,W), got " + ys.str() +
                            " and " + is.str());
  }
  ad::Tape& tape = y_hat.tape();
  const std::size_t before = tape.degenerate_pearson_count();
  ad::Var sum;
  for (std::size_t k = 0; k < 3; ++k) {
    ad::Var rho = ad::pearson_correlation(y_hat, ad::slice_channel(indices, k));
    ad::Var penalty = ad::shift(ad::scalar_mul(ad::abs_smooth(rho), -1.0), 1.0);
    sum = sum.valid() ? ad::add(sum, penalty) : penalty;
  }
  return {ad::scalar_mul(sum, 1.0 / 3.0), tape.degenerate_pearson_count() - before};
}

ad::Var bias_loss(ad::Var y_hat, const Grid& x_coarse) {
  if (x_coarse.empty()) throw ad::AutodiffError("bias_loss: empty coarse grid");
  ad::Tape& tape = y_hat.tape();
  ad::Var target = tape.constant(ad::Shape{}, std::vector<double>{x_coarse.mean()});
  // When the fine lattice nests the coarse one, average through coarse blocks.
  // The value is the same spatial mean, and a replicated coarse field then
  // reproduces mean(x_coarse) bit for bit.
  const auto& s = y_hat.shape();
  const bool nested = s.rank() == 3 && s[0] == 1 && s[1] % x_coarse.height() == 0 &&
                      s[2] % x_coarse.width() == 0 &&
                      s[1] / x_coarse.height() == s[2] / x_coarse.width();
  ad::Var fine_mean = nested ? ad::reduce_mean(ad::block_mean(y_hat, s[1] / x_coarse.height()))
                             : ad::reduce_mean(y_hat);
  return ad::abs_smooth(ad::sub(fine_mean, target));
}

TtaLoss tta_loss(std::span<const ad::Var> predictions, ad::Var indices,
                 const Grid& x_coarse, const LossWeights& weights) {
  weights.validate();
  ad::Var u = uncertainty_loss(predictions);
  ad::Var mean_pred = ad::mean_over_set(predictions);
  LulcLoss l = lulc_loss(mean_pred, indices);
  ad::Var b = bias_loss(mean_pred, x_coarse);
  ad::Var total = ad::add(ad::add(ad::scalar_mul(u, weights.lambda1),
                                  ad::scalar_mul(l.loss, weights.lambda2)),
                          ad::scalar_mul(b, weights.lambda3));
  LossBreakdown bd;
  bd.uncertainty = u.item();
  bd.lulc = l.loss.item();
  bd.bias = b.item();
  bd.total = total.item();
  bd.degenerate_rho_count = l.degenerate_rho_count;
  return {total, bd};
}

LossBreakdown mean_breakdown(std::span<const LossBreakdown> rows) {
  if (rows.empty()) throw std::invalid_argument("mean of zero loss rows");
  LossBreakdown m;
  for (const auto& r : rows) {
    m.uncertainty += r.uncertainty;
    m.lulc += r.lulc;
    m.bias += r.bias;
    m.total += r.total;
    m.degenerate_rho_count += r.degenerate_rho_count;
  }
  const double n = static_cast<double>(rows.size());
  m.uncertainty /= n;
  m.lulc /= n;
  m.bias /= n;
  m.total /= n;
  return m;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string breakdown_csv_header() {
  return "epoch,patch_id,uncertainty,lulc,bias,total,degenerate_rho_count";
}

std::string breakdown_csv_row(std::size_t epoch, std::size_t patch_id,
                              const LossBreakdown& b) {
  return std::to_string(epoch) + ',' + std::to_string(patch_id) + ',' +
         format_double(b.uncertainty) + ',' + format_double(b.lulc) + ',' +
         format_double(b.bias) + ',' + format_double(b.total) + ',' +
         std::to_string(b.degenerate_rho_count);
}

}  // namespace lsttta

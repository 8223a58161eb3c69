#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lsttta/grid.hpp"
#include "lsttta/model.hpp"
#include "lsttta/scenario.hpp"

namespace lsttta {

double rmse(const Grid& pred, const Grid& truth);
double mae(const Grid& pred, const Grid& truth);

enum class EvalMode { kDeterministic, kMcMean };

struct EvalConfig {
  std::size_t aggregation_factor = 2;
  EvalMode mode = EvalMode::kDeterministic;
  std::size_t mc_samples = 10;  // kMcMean only
  std::uint64_t seed = 0;       // kMcMean only
  std::size_t threads = 1;
};

struct DateMetrics {
  std::string date;
  double rmse = 0.0;
  double mae = 0.0;
};

struct RegionMetrics {
  std::string region;
  std::vector<DateMetrics> dates;
  double rmse = 0.0;  // equal-weight mean over dates
  double mae = 0.0;
};

/// Full-scene predictions and truth are both block-averaged by the
/// aggregation factor before scoring. Weights are never modified.
RegionMetrics evaluate(const EfdModel& model, const Dataset& region, const EvalConfig& config);

struct MetricRow {
  std::string region;
  std::string metric;  // "RMSE" or "MAE"
  double before = 0.0;
  double after = 0.0;
  double improvement_pct = 0.0;
};

double improvement_pct(double before, double after);

struct RegionComparison {
  RegionMetrics before;
  RegionMetrics after;
};

/// Scores one region before and after adaptation. Throws ModelError if the
/// two models differ in architecture.
RegionComparison compare(const EfdModel& before, const EfdModel& after, const Dataset& region,
                         const EvalConfig& config);

/// RMSE and MAE rows per region followed by an "Average" pair whose
/// before/after values are the means of the region rows.
std::vector<MetricRow> metric_rows(std::span<const RegionComparison> regions);

void write_metrics_csv(std::span<const MetricRow> rows, const std::filesystem::path& path);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

/// Plain-text Region / Metric / Before / After (improvement %) table.
std::string render_table(std::span<const MetricRow> rows);

}  // namespace lsttta

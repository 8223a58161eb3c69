#include "lsttta/evalreport.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "lsttta/adapt.hpp"
#include "lsttta/losses.hpp"

namespace lsttta {

namespace {
void require_match(const Grid& a, const Grid& b, const char* what) {
  if (!a.same_shape(b)) throw GridError(std::string(what) + ": dimension mismatch");
  if (a.empty()) throw GridError(std::string(what) + ": empty grids");
}
}  // namespace

double rmse(const Grid& pred, const Grid& truth) {
  require_match(pred, truth, "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.values()[i] - truth.values()[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(pred.size()));
}

double mae(const Grid& pred, const Grid& truth) {
  require_match(pred, truth, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    s += std::abs(pred.values()[i] - truth.values()[i]);
  }
  return s / static_cast<double>(pred.size());
}

RegionMetrics evaluate(const EfdModel& model, const Dataset& region, const EvalConfig& config) {
  if (region.samples.empty()) throw ScenarioError("region '" + region.spec.name + "' has no dates");
  RegionMetrics out;
  out.region = region.spec.name;
  out.dates.resize(region.samples.size());
  std::vector<std::exception_ptr> errors(region.samples.size());

  const auto score = [&](std::size_t i) {
    try {
      const TargetSample& s = region.samples[i];
      if (s.truth_fine.empty()) throw ScenarioError("evaluation needs truth for " + s.obs.date);
      const Grid x = upsample_replicate(s.obs.x_coarse, coarse_ratio(s.obs));
      Grid pred;
      if (config.mode == EvalMode::kDeterministic) {
        pred = predict(model, x, s.obs.indices);
      } else {
        const DropoutPlan plan(model.dropout_rate(),
                               RngKey::from_seed(config.seed).derive("eval-dropout").derive(
                                   s.obs.date));
        pred = predict_mc_mean(model, x, s.obs.indices, plan, config.mc_samples);
      }
      const Grid p = block_aggregate(pred, config.aggregation_factor);
      const Grid t = block_aggregate(s.truth_fine, config.aggregation_factor);
      out.dates[i] = {s.obs.date, rmse(p, t), mae(p, t)};
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  const std::size_t workers = std::min(std::max<std::size_t>(config.threads, 1),
                                       region.samples.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < region.samples.size(); ++i) score(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < region.samples.size(); i += workers) score(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (const auto& d : out.dates) {
    out.rmse += d.rmse;
    out.mae += d.mae;
  }
  out.rmse /= static_cast<double>(out.dates.size());
  out.mae /= static_cast<double>(out.dates.size());
  return out;
}

double improvement_pct(double before, double after) {
  if (before == 0.0) return 0.0;
  return 100.0 * (before - after) / before;
}

RegionComparison compare(const EfdModel& before, const EfdModel& after, const Dataset& region,
                         const EvalConfig& config) {
  if (!before.same_architecture(after)) {
    throw ModelError("before/after checkpoints differ in architecture");
  }
  return {evaluate(before, region, config), evaluate(after, region, config)};
}

std::vector<MetricRow> metric_rows(std::span<const RegionComparison> regions) {
  std::vector<MetricRow> rows;
  double rb = 0.0, ra = 0.0, mb = 0.0, ma = 0.0;
  for (const auto& r : regions) {
    rows.push_back({r.before.region, "RMSE", r.before.rmse, r.after.rmse,
                    improvement_pct(r.before.rmse, r.after.rmse)});
    rows.push_back({r.before.region, "MAE", r.before.mae, r.after.mae,
                    improvement_pct(r.before.mae, r.after.mae)});
    rb += r.before.rmse;
    ra += r.after.rmse;
    mb += r.before.mae;
    ma += r.after.mae;
  }
  if (!regions.empty()) {
    const double n = static_cast<double>(regions.size());
    rows.push_back({"Average", "RMSE", rb / n, ra / n, improvement_pct(rb / n, ra / n)});
    rows.push_back({"Average", "MAE", mb / n, ma / n, improvement_pct(mb / n, ma / n)});
  }
  return rows;
}

void write_metrics_csv(std::span<const MetricRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ScenarioError("cannot write " + path.string());
  out << "region,metric,before,after,improvement_pct\n";
  for (const auto& r : rows) {
    out << r.region << ',' << r.metric << ',' << format_double(r.before) << ','
        << format_double(r.after) << ',' << format_double(r.improvement_pct) << '\n';
  }
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "region,metric,before,after,improvement_pct") {
    throw ScenarioError(path.string() + ": unexpected metrics header");
  }
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    MetricRow r;
    std::string before, after, pct;
    if (!std::getline(ls, r.region, ',') || !std::getline(ls, r.metric, ',') ||
        !std::getline(ls, before, ',') || !std::getline(ls, after, ',') ||
        !std::getline(ls, pct)) {
      throw ScenarioError(path.string() + ": malformed row '" + line + "'");
    }
    try {
      r.before = std::stod(before);
      r.after = std::stod(after);
      r.improvement_pct = std::stod(pct);
    } catch (const std::exception&) {
      throw ScenarioError(path.string() + ": malformed row '" + line + "'");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string render_table(std::span<const MetricRow> rows) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-14s %-6s %12s %22s\n", "Region", "Metric", "Before TTA",
                "After TTA");
  os << buf << std::string(57, '-') << '\n';
  std::string last;
  for (const auto& r : rows) {
    if (!last.empty() && r.region != last) os << std::string(57, '-') << '\n';
    char after[64];
    std::snprintf(after, sizeof after, "%.3f (%.2f%%)", r.after, r.improvement_pct);
    std::snprintf(buf, sizeof buf, "%-14s %-6s %12.3f %22s\n",
                  r.region == last ? "" : r.region.c_str(), r.metric.c_str(), r.before, after);
    os << buf;
    last = r.region;
  }
  return os.str();
}

}  // namespace lsttta

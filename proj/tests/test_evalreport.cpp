#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "lsttta/evalreport.hpp"
#include "oracles.hpp"

using namespace lsttta;

namespace {

Dataset flat_region(double base, std::size_t dates) {
  RegionSpec r;
  r.name = "flat";
  r.height = 16;
  r.width = 16;
  r.fractions = {0.4, 0.4, 0.2};
  r.law = {base, 0.0, 0.0, 0.0, 0.0};
  r.date_offsets_k.assign(dates, 0.0);
  r.smoothness_px = 3.0;
  r.seed = 5;
  return generate_region(r, 4);
}

// All weights zero; the output bias alone sets t_ref + t_scale * bias.
EfdModel constant_model(double kelvin) {
  EfdModel m(0.1);
  for (auto& l : m.layers()) {
    std::fill(l.weight.begin(), l.weight.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
  m.layers()[EfdModel::kDecoderOut].bias[0] = (kelvin - m.t_ref()) / m.t_scale();
  m.mark_initialized();
  return m;
}

Dataset textured_region(std::uint64_t seed) {
  RegionSpec r;
  r.name = "tex";
  r.height = 16;
  r.width = 16;
  r.fractions = {0.4, 0.4, 0.2};
  r.law = {300.0, 6.0, 8.0, 6.0, 0.3};
  r.date_offsets_k = {-1.0, 2.0};
  r.smoothness_px = 3.0;
  r.seed = seed;
  return generate_region(r, 4);
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "lsttta_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_SUITE("evalreport") {
  TEST_CASE("rmse and mae of identical and offset grids") {
    std::mt19937_64 rng(1);
    Grid t(4, 5, oracle::random_vector(rng, 20, 290, 310));
    CHECK(rmse(t, t) == 0.0);
    CHECK(mae(t, t) == 0.0);
    Grid p = t;
    for (double& v : p.values()) v += 2.0;
    CHECK(rmse(p, t) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(mae(p, t) == doctest::Approx(2.0).epsilon(1e-12));
  }

  TEST_CASE("rmse and mae match scalar oracles and respect rmse >= mae >= 0") {
    std::mt19937_64 rng(2);
    for (int rep = 0; rep < 1000; ++rep) {
      auto a = oracle::random_vector(rng, 12, 280, 320);
      auto b = oracle::random_vector(rng, 12, 280, 320);
      const double r = rmse(Grid(3, 4, a), Grid(3, 4, b));
      const double m = mae(Grid(3, 4, a), Grid(3, 4, b));
      CHECK(std::abs(r - oracle::rmse(a, b)) <= 1e-12);
      CHECK(std::abs(m - oracle::mae(a, b)) <= 1e-12);
      CHECK(r >= m);
      CHECK(m >= 0.0);
    }
  }

  TEST_CASE("metrics reject mismatched or empty grids") {
    CHECK_THROWS_AS(rmse(Grid(2, 2, 0.0), Grid(2, 3, 0.0)), GridError);
    CHECK_THROWS_AS(mae(Grid(2, 2, 0.0), Grid(3, 2, 0.0)), GridError);
    CHECK_THROWS_AS(rmse(Grid(), Grid()), GridError);
  }

  TEST_CASE("improvement percentage") {
    CHECK(improvement_pct(2.0, 1.5) == doctest::Approx(25.0).epsilon(1e-12));
    CHECK(improvement_pct(2.0, 2.0) == 0.0);
    CHECK(improvement_pct(1.0, 1.5) == doctest::Approx(-50.0).epsilon(1e-12));
  }

  TEST_CASE("a perfect model on a noise-free world scores zero") {
    const Dataset d = flat_region(300.0, 2);
    const RegionMetrics r = evaluate(constant_model(300.0), d, EvalConfig{});
    CHECK(r.rmse == 0.0);
    CHECK(r.mae == 0.0);
    CHECK(r.dates.size() == 2);
  }

  TEST_CASE("a constant offset survives aggregation unchanged") {
    const Dataset d = flat_region(300.0, 1);
    const EfdModel m = constant_model(302.0);
    for (std::size_t f : {1u, 2u, 4u}) {
      EvalConfig c;
      c.aggregation_factor = f;
      const RegionMetrics r = evaluate(m, d, c);
      CHECK(r.rmse == doctest::Approx(2.0).epsilon(1e-12));
      CHECK(r.mae == doctest::Approx(2.0).epsilon(1e-12));
    }
  }

  TEST_CASE("aggregated metrics never exceed fine metrics for a random model") {
    const Dataset d = textured_region(3);
    EfdModel m(0.1);
    m.initialize(RngKey::from_seed(3));
    EvalConfig fine, coarse;
    fine.aggregation_factor = 1;
    coarse.aggregation_factor = 2;
    const RegionMetrics a = evaluate(m, d, fine), b = evaluate(m, d, coarse);
    CHECK(b.rmse <= a.rmse);
  }

  TEST_CASE("region metrics weight dates equally") {
    const Dataset d = textured_region(4);
    EfdModel m(0.1);
    m.initialize(RngKey::from_seed(4));
    const RegionMetrics r = evaluate(m, d, EvalConfig{});
    REQUIRE(r.dates.size() == 2);
    CHECK(r.rmse == doctest::Approx((r.dates[0].rmse + r.dates[1].rmse) / 2).epsilon(1e-15));
    CHECK(r.mae == doctest::Approx((r.dates[0].mae + r.dates[1].mae) / 2).epsilon(1e-15));
    CHECK(r.dates[0].date == "tex-d0");
  }

  TEST_CASE("evaluation is deterministic, thread-independent and leaves weights alone") {
    const Dataset d = textured_region(5);
    EfdModel m(0.1);
    m.initialize(RngKey::from_seed(5));
    const EfdModel before = m;
    EvalConfig c;
    const RegionMetrics a = evaluate(m, d, c);
    c.threads = 2;
    const RegionMetrics b = evaluate(m, d, c);
    CHECK(a.rmse == b.rmse);
    CHECK(a.mae == b.mae);
    CHECK(m == before);
    c.mode = EvalMode::kMcMean;
    c.mc_samples = 4;
    const RegionMetrics mc1 = evaluate(m, d, c), mc2 = evaluate(m, d, c);
    CHECK(mc1.rmse == mc2.rmse);
    CHECK(mc1.rmse != a.rmse);
  }

  TEST_CASE("evaluation error paths") {
    Dataset d = textured_region(6);
    EfdModel m(0.1);
    m.initialize(RngKey::from_seed(6));
    EvalConfig c;
    c.aggregation_factor = 3;
    CHECK_THROWS_AS(evaluate(m, d, c), GridError);
    Dataset no_truth = d;
    no_truth.samples[0].truth_fine = Grid();
    CHECK_THROWS_AS(evaluate(m, no_truth, EvalConfig{}), ScenarioError);
    Dataset empty = d;
    empty.samples.clear();
    CHECK_THROWS_AS(evaluate(m, empty, EvalConfig{}), ScenarioError);
  }

  TEST_CASE("identical checkpoints improve by exactly zero") {
    const Dataset d = textured_region(7);
    EfdModel m(0.1);
    m.initialize(RngKey::from_seed(7));
    const RegionComparison cmp = compare(m, m, d, EvalConfig{});
    const std::vector<RegionComparison> all{cmp};
    for (const auto& row : metric_rows(all)) CHECK(row.improvement_pct == 0.0);
  }

  TEST_CASE("comparing different architectures is rejected") {
    const Dataset d = textured_region(8);
    EfdModel a(0.1), b(0.1, 300.0, 12.0);
    a.initialize(RngKey::from_seed(1));
    b.initialize(RngKey::from_seed(1));
    CHECK_THROWS_AS(compare(a, b, d, EvalConfig{}), ModelError);
  }

  TEST_CASE("metric rows list regions then an Average pair") {
    std::vector<RegionComparison> regions(4);
    const std::vector<std::string> names{"rome", "cairo", "madrid", "montpellier"};
    for (std::size_t i = 0; i < 4; ++i) {
      regions[i].before = {names[i], {}, 2.0 + static_cast<double>(i), 1.5 + static_cast<double>(i)};
      regions[i].after = {names[i], {}, 1.0 + static_cast<double>(i), 1.0};
    }
    const auto rows = metric_rows(regions);
    REQUIRE(rows.size() == 10);
    CHECK(rows[0].region == "rome");
    CHECK(rows[0].metric == "RMSE");
    CHECK(rows[1].metric == "MAE");
    CHECK(rows[8].region == "Average");
    CHECK(rows[8].metric == "RMSE");
    CHECK(rows[8].before == doctest::Approx(3.5).epsilon(1e-15));
    CHECK(rows[8].after == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(rows[9].before == doctest::Approx(3.0).epsilon(1e-15));
    for (const auto& r : rows) {
      CHECK(std::abs(r.improvement_pct - 100.0 * (r.before - r.after) / r.before) <= 1e-9);
    }

    const std::string table = render_table(rows);
    for (const auto& n : names) CHECK(table.find(n) != std::string::npos);
    CHECK(table.find("Average") != std::string::npos);
    CHECK(table.find("(28.57%)") != std::string::npos);
  }

  TEST_CASE("metrics CSV round trip and malformed input") {
    std::vector<MetricRow> rows{{"rome", "RMSE", 1.0 / 3.0, 0.25, improvement_pct(1.0 / 3.0, 0.25)},
                                {"Average", "MAE", 2.0, 1.0, 50.0}};
    const auto path = temp_file("metrics.csv");
    write_metrics_csv(rows, path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "region,metric,before,after,improvement_pct");
    const auto back = read_metrics_csv(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].before == rows[0].before);
    CHECK(back[0].improvement_pct == rows[0].improvement_pct);
    CHECK(back[1].region == "Average");

    std::ofstream(temp_file("bad_header.csv")) << "a,b\n";
    CHECK_THROWS_AS(read_metrics_csv(temp_file("bad_header.csv")), ScenarioError);
    std::ofstream(temp_file("bad_row.csv")) << "region,metric,before,after,improvement_pct\nrome,RMSE,x,1,2\n";
    CHECK_THROWS_AS(read_metrics_csv(temp_file("bad_row.csv")), ScenarioError);
    CHECK_THROWS_AS(read_metrics_csv(temp_file("does_not_exist.csv")), ScenarioError);
  }
}

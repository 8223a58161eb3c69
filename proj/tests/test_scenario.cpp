#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "lsttta/losses.hpp"
#include "lsttta/scenario.hpp"
#include "oracles.hpp"

using namespace lsttta;

namespace {

RegionSpec small_region(const std::string& name, std::uint64_t seed) {
  RegionSpec r;
  r.name = name;
  r.height = 32;
  r.width = 32;
  r.fractions = {0.3, 0.5, 0.2};
  r.law = {300.0, 6.0, 8.0, 6.0, 0.3};
  r.sensor_bias_k = 0.5;
  r.date_offsets_k = {-2.0, 3.0};
  r.smoothness_px = 4.0;
  r.seed = seed;
  return r;
}

WorldConfig small_world() {
  WorldConfig c;
  c.source = small_region("src", 1);
  c.targets = {small_region("tgt", 2)};
  c.targets[0].fractions = {0.6, 0.3, 0.1};
  return c;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "lsttta_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

void check_same_dataset(const Dataset& a, const Dataset& b, bool truth) {
  CHECK(a.spec.name == b.spec.name);
  CHECK(a.indices_t1.ndvi == b.indices_t1.ndvi);
  CHECK(a.indices_t1.ndwi == b.indices_t1.ndwi);
  CHECK(a.indices_t1.ndbi == b.indices_t1.ndbi);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].obs.date == b.samples[i].obs.date);
    CHECK(a.samples[i].obs.x_coarse == b.samples[i].obs.x_coarse);
    if (truth) CHECK(a.samples[i].truth_fine == b.samples[i].truth_fine);
  }
}

}  // namespace

TEST_SUITE("scenario") {
  TEST_CASE("noise-free law without index gains gives a constant field") {
    RegionSpec r = small_region("flat", 3);
    r.law = {300.0, 0.0, 0.0, 0.0, 0.0};
    r.date_offsets_k = {0.0};
    r.sensor_bias_k = 2.0;
    const Dataset d = generate_region(r, 4);
    const auto& s = d.samples[0];
    for (double v : s.truth_fine.values()) CHECK(v == 300.0);
    ad::Tape t;
    ad::Var y = t.constant(ad::Shape{1, 32, 32}, s.truth_fine.values());
    CHECK(bias_loss(y, s.obs.x_coarse).item() == 2.0);
  }

  TEST_CASE("coarse field is the aggregated truth plus the sensor bias, exactly") {
    const World w = generate_world(small_world());
    for (const Dataset* d : {&w.source, &w.targets[0]}) {
      for (const auto& s : d->samples) {
        Grid expect = block_aggregate(s.truth_fine, 4);
        for (double& v : expect.values()) v += d->spec.sensor_bias_k;
        CHECK(expect == s.obs.x_coarse);
      }
    }
  }

  TEST_CASE("same seed gives bit-identical worlds, different seeds differ") {
    const World a = generate_world(small_world());
    const World b = generate_world(small_world());
    check_same_dataset(a.source, b.source, true);
    check_same_dataset(a.targets[0], b.targets[0], true);
    WorldConfig c = small_world();
    c.targets[0].seed = 77;
    const World other = generate_world(c);
    CHECK_FALSE(other.targets[0].indices_t1.ndvi == a.targets[0].indices_t1.ndvi);
  }

  TEST_CASE("land-cover fractions shape the index statistics") {
    RegionSpec wet = small_region("wet", 4);
    wet.fractions = {0.1, 0.2, 0.7};
    RegionSpec urban = small_region("urban", 4);
    urban.fractions = {0.8, 0.15, 0.05};
    const IndexStack a = generate_indices(wet), b = generate_indices(urban);
    CHECK(a.ndwi.mean() > b.ndwi.mean());
    CHECK(b.ndbi.mean() > a.ndbi.mean());
    CHECK_NOTHROW(a.validate());
  }

  TEST_CASE("noise-free truth correlates strongly with the dominant index") {
    RegionSpec r = small_region("corr", 5);
    r.law = {300.0, 0.0, 10.0, 0.0, 0.0};
    const Dataset d = generate_region(r, 4);
    const auto truth = d.samples[0].truth_fine.values();
    const double rho = oracle::pearson(std::vector<double>(truth.begin(), truth.end()),
                                       oracle::to_vec(d.indices_t1.ndvi.values()));
    CHECK(rho < -0.999);
  }

  TEST_CASE("date offsets shift each date's truth") {
    RegionSpec r = small_region("dates", 6);
    r.law.noise_sigma = 0.0;
    const Dataset d = generate_region(r, 4);
    REQUIRE(d.samples.size() == 2);
    CHECK(d.samples[1].truth_fine.mean() - d.samples[0].truth_fine.mean() ==
          doctest::Approx(5.0).epsilon(1e-9));
    CHECK(d.samples[0].obs.date == "dates-d0");
  }

  TEST_CASE("invalid specs are rejected") {
    RegionSpec r = small_region("bad", 7);
    r.fractions = {0.5, 0.5, 0.5};
    CHECK_THROWS_AS(generate_region(r, 4), ScenarioError);
    r.fractions = {1.2, -0.1, -0.1};
    CHECK_THROWS_AS(generate_region(r, 4), ScenarioError);
    r = small_region("bad", 7);
    r.law.noise_sigma = -1.0;
    CHECK_THROWS_AS(generate_region(r, 4), ScenarioError);
    r = small_region("bad", 7);
    r.height = 30;
    CHECK_THROWS_AS(generate_region(r, 4), ScenarioError);
    r = small_region("bad", 7);
    r.date_offsets_k.clear();
    CHECK_THROWS_AS(generate_region(r, 4), ScenarioError);
    WorldConfig c = small_world();
    c.targets[0].name = "src";
    CHECK_THROWS_AS(generate_world(c), ScenarioError);
  }

  TEST_CASE("default world mirrors the published target layout") {
    const WorldConfig c = default_world(0);
    CHECK(c.coarse_ratio == 4);
    CHECK(c.source.height == 96);
    REQUIRE(c.targets.size() == 4);
    const std::vector<std::string> names{"rome", "cairo", "madrid", "montpellier"};
    const std::vector<std::size_t> dates{4, 3, 2, 2};
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(c.targets[i].name == names[i]);
      CHECK(c.targets[i].dates() == dates[i]);
      CHECK_NOTHROW(c.targets[i].validate(4));
    }
    CHECK(default_world(1).targets[0].seed != c.targets[0].seed);
  }

  TEST_CASE("world save and load round trip with a manifest") {
    const World w = generate_world(small_world());
    const auto dir = fresh_dir("world");
    save_world(w, dir);
    CHECK(std::filesystem::exists(dir / "world.manifest.json"));
    const World back = load_world(dir);
    check_same_dataset(w.source, back.source, true);
    check_same_dataset(w.targets[0], back.targets[0], true);
    CHECK(back.config.coarse_ratio == 4);
    CHECK(back.targets[0].spec.sensor_bias_k == w.targets[0].spec.sensor_bias_k);
    CHECK(back.targets[0].spec.fractions.built == w.targets[0].spec.fractions.built);

    std::ifstream in(dir / "world.manifest.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j.at("format") == "lsttta-world-1");

    const auto obs = load_observations(dir, "tgt");
    REQUIRE(obs.size() == 2);
    CHECK(obs[1].x_coarse == w.targets[0].samples[1].obs.x_coarse);
  }

  TEST_CASE("observations load without truth rasters") {
    const World w = generate_world(small_world());
    const auto dir = fresh_dir("no_truth");
    save_world(w, dir);
    for (const auto& s : w.targets[0].samples) {
      std::filesystem::remove(dir / "tgt" / (s.obs.date + ".truth.grd"));
    }
    CHECK_NOTHROW(load_observations(dir, "tgt"));
    CHECK_THROWS(load_world(dir));
    CHECK_THROWS_AS(load_observations(dir, "nowhere"), ScenarioError);
  }

  TEST_CASE("malformed or missing manifests are reported") {
    const auto dir = fresh_dir("bad_manifest");
    CHECK_THROWS_AS(load_world(dir), ScenarioError);
    std::ofstream(dir / "world.manifest.json") << "{ not json";
    CHECK_THROWS_AS(load_world(dir), ScenarioError);
    std::ofstream(dir / "world.manifest.json") << R"({"format":"lsttta-world-1"})";
    CHECK_THROWS_AS(load_world(dir), ScenarioError);
  }

  TEST_CASE("pretraining beats the mean predictor on the source") {
    RegionSpec r = small_region("src", 8);
    const Dataset d = generate_region(r, 4);
    EfdModel m(0.1);
    m.initialize(RngKey::from_seed(8));
    PretrainConfig pc;
    pc.epochs = 15;
    pc.patch_size = 16;
    pc.stride = 8;
    pc.seed = 8;
    const PretrainReport rep = pretrain(m, d, pc);
    CHECK(rep.epoch_mse.size() == 15);
    CHECK(rep.epoch_mse.back() < rep.epoch_mse.front());

    // Baseline: each date predicted by its own truth mean.
    double ss = 0.0;
    std::size_t n = 0;
    for (const auto& s : d.samples) {
      const double mu = s.truth_fine.mean();
      for (double v : s.truth_fine.values()) ss += (v - mu) * (v - mu), ++n;
    }
    CHECK(rep.mean_baseline_rmse == doctest::Approx(std::sqrt(ss / static_cast<double>(n))).epsilon(1e-9));
    CHECK(rep.source_rmse < rep.mean_baseline_rmse);
  }

  TEST_CASE("pretraining with zero epochs leaves the model unchanged") {
    const Dataset d = generate_region(small_region("src", 9), 4);
    EfdModel m(0.1);
    m.initialize(RngKey::from_seed(9));
    const EfdModel before = m;
    PretrainConfig pc;
    pc.epochs = 0;
    pc.patch_size = 16;
    pretrain(m, d, pc);
    CHECK(m == before);
  }

  TEST_CASE("pretraining is reproducible for a fixed seed") {
    const Dataset d = generate_region(small_region("src", 10), 4);
    PretrainConfig pc;
    pc.epochs = 2;
    pc.patch_size = 16;
    pc.stride = 16;
    pc.seed = 3;
    EfdModel a(0.1), b(0.1);
    a.initialize(RngKey::from_seed(1));
    b.initialize(RngKey::from_seed(1));
    pretrain(a, d, pc);
    pretrain(b, d, pc);
    CHECK(a == b);
  }

  TEST_CASE("pretraining error paths") {
    Dataset d = generate_region(small_region("src", 11), 4);
    EfdModel fresh(0.1);
    CHECK_THROWS_AS(pretrain(fresh, d, PretrainConfig{}), ScenarioError);
    EfdModel m(0.1);
    m.initialize(RngKey::from_seed(1));
    Dataset empty = d;
    empty.samples.clear();
    CHECK_THROWS_AS(pretrain(m, empty, PretrainConfig{}), ScenarioError);
    d.samples[0].truth_fine = Grid();
    CHECK_THROWS_AS(pretrain(m, d, PretrainConfig{}), ScenarioError);
  }
}

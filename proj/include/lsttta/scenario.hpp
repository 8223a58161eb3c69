#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lsttta/adapt.hpp"
#include "lsttta/grid.hpp"
#include "lsttta/model.hpp"
#include "lsttta/sample.hpp"

namespace lsttta {

class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LandCoverFractions {
  double built = 1.0 / 3.0;
  double vegetation = 1.0 / 3.0;
  double water = 1.0 / 3.0;
};

/// Fine LST = base + offset_date + a*NDBI - b*NDVI - c*NDWI + N(0, sigma^2).
struct LstLaw {
  double base_k = 300.0;
  double ndbi_gain = 0.0;  // a
  double ndvi_gain = 0.0;  // b
  double ndwi_gain = 0.0;  // c
  double noise_sigma = 0.0;
};

/// One synthetic region.
struct RegionSpec {
  std::string name;
  std::size_t height = 96;
  std::size_t width = 96;
  LandCoverFractions fractions;
  LstLaw law;
  double sensor_bias_k = 0.0;  // added to the coarse sensor after aggregation
  /// One entry per date; shifts the base temperature of that date.
  std::vector<double> date_offsets_k{0.0};
  double smoothness_px = 6.0;
  std::uint64_t seed = 0;

  std::size_t dates() const { return date_offsets_k.size(); }
  void validate(std::size_t coarse_ratio) const;
};

struct WorldConfig {
  RegionSpec source;
  std::vector<RegionSpec> targets;
  std::size_t coarse_ratio = 4;
};

/// Source "orleans" plus rome/cairo/madrid/montpellier with 4/3/2/2 dates.
WorldConfig default_world(std::uint64_t seed);

struct Dataset {
  RegionSpec spec;
  IndexStack indices_t1;
  std::vector<TargetSample> samples;

  std::vector<Observation> observations() const;
};

struct World {
  WorldConfig config;
  Dataset source;
  std::vector<Dataset> targets;
};

/// Land-cover indices for one region, from seeded smooth random fields.
IndexStack generate_indices(const RegionSpec& spec);

Dataset generate_region(const RegionSpec& spec, std::size_t coarse_ratio);
World generate_world(const WorldConfig& config);

/// Writes GRD1 rasters and `world.manifest.json` under `dir`.
void save_world(const World& world, const std::filesystem::path& dir);
World load_world(const std::filesystem::path& dir);
/// Reads one region's observations without touching truth rasters.
std::vector<Observation> load_observations(const std::filesystem::path& dir,
                                           const std::string& region);

struct PretrainConfig {
  std::size_t epochs = 30;
  double learning_rate = 2e-3;
  std::size_t patch_size = 32;
  std::size_t stride = 8;
  std::uint64_t seed = 0;
};

struct PretrainReport {
  std::vector<double> epoch_mse;
  double source_rmse = 0.0;
  double mean_baseline_rmse = 0.0;
};

/// Supervised MSE training of every parameter on the source truth, with
/// dropout active. Throws ScenarioError on a non-finite loss.
PretrainReport pretrain(EfdModel& model, const Dataset& source, const PretrainConfig& config);

}  // namespace lsttta

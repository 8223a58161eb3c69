#include "lsttta/scenario.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

#include "lsttta/evalreport.hpp"
#include "lsttta/rng.hpp"

namespace lsttta {

using nlohmann::json;

void RegionSpec::validate(std::size_t coarse_ratio) const {
  const auto& f = fractions;
  if (f.built < 0.0 || f.vegetation < 0.0 || f.water < 0.0 ||
      std::abs(f.built + f.vegetation + f.water - 1.0) > 1e-9) {
    throw ScenarioError("region '" + name + "': land-cover fractions must be >= 0 and sum to 1");
  }
  if (!(law.noise_sigma >= 0.0)) throw ScenarioError("region '" + name + "': sigma must be >= 0");
  if (date_offsets_k.empty()) throw ScenarioError("region '" + name + "': needs at least one date");
  if (coarse_ratio == 0 || height == 0 || width == 0 || height % coarse_ratio != 0 ||
      width % coarse_ratio != 0) {
    throw ScenarioError("region '" + name + "': lattice not divisible by coarse ratio");
  }
  if (!(smoothness_px > 0.0)) throw ScenarioError("region '" + name + "': smoothness must be > 0");
}

WorldConfig default_world(std::uint64_t seed) {
  const auto region = [seed](std::string name, LandCoverFractions f, LstLaw law, double bias,
                             std::vector<double> offsets, std::uint64_t salt) {
    RegionSpec r;
    r.name = std::move(name);
    r.fractions = f;
    r.law = law;
    r.sensor_bias_k = bias;
    r.date_offsets_k = std::move(offsets);
    r.seed = mix64(seed * 0x100 + salt);
    return r;
  };
  WorldConfig w;
  w.coarse_ratio = 4;
  w.source = region("orleans", {0.25, 0.60, 0.15}, {298.0, 6.0, 8.0, 6.0, 0.3}, -1.5,
                    {-8.0, -3.0, 3.0, 9.0}, 1);
  w.targets = {
      region("rome", {0.45, 0.45, 0.10}, {303.0, 7.0, 8.0, 6.0, 0.3}, 0.3,
             {-4.0, -1.0, 2.0, 5.0}, 2),
      region("cairo", {0.70, 0.18, 0.12}, {306.0, 9.0, 9.0, 7.0, 0.3}, 0.5,
             {-3.0, 1.0, 4.0}, 3),
      region("madrid", {0.60, 0.35, 0.05}, {308.0, 8.0, 8.0, 6.0, 0.3}, 0.2, {-1.0, 2.0}, 4),
      region("montpellier", {0.35, 0.50, 0.15}, {301.0, 6.0, 8.0, 6.0, 0.3}, -0.2,
             {-2.0, 2.0}, 5),
  };
  return w;
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable Gaussian blur with clamped borders.
Grid smooth(const Grid& g, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const long r = static_cast<long>(k.size() / 2);
  const long h = static_cast<long>(g.height()), w = static_cast<long>(g.width());
  Grid tmp(g.height(), g.width()), out(g.height(), g.width());
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      double s = 0.0;
      for (long i = -r; i <= r; ++i) s += k[i + r] * g(y, std::clamp(x + i, 0L, w - 1));
      tmp(y, x) = s;
    }
  }
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      double s = 0.0;
      for (long i = -r; i <= r; ++i) s += k[i + r] * tmp(std::clamp(y + i, 0L, h - 1), x);
      out(y, x) = s;
    }
  }
  return out;
}

// Zero-mean, unit-variance smooth random field.
Grid smooth_field(const RngKey& key, std::size_t h, std::size_t w, double sigma) {
  Grid g = smooth(Grid(h, w, gaussian(key, h * w)), sigma);
  const double m = g.mean();
  double var = 0.0;
  for (double v : g.values()) var += (v - m) * (v - m);
  const double sd = std::sqrt(var / static_cast<double>(g.size()));
  for (double& v : g.values()) v = sd > 0.0 ? (v - m) / sd : 0.0;
  return g;
}

enum Cover { kWater = 0, kVegetation = 1, kBuilt = 2 };

// Reflectance of {red, green, nir, swir} per cover class.
constexpr double kReflectance[3][4] = {
    {0.04, 0.07, 0.02, 0.01},  // water
    {0.05, 0.08, 0.40, 0.20},  // vegetation
    {0.20, 0.18, 0.25, 0.32},  // built-up
};

}  // namespace

IndexStack generate_indices(const RegionSpec& spec) {
  const RngKey key = RngKey::from_seed(spec.seed).derive("indices");
  const std::size_t h = spec.height, w = spec.width, n = h * w;

  // Low field values become water, the middle band vegetation, the rest built-up.
  const Grid layout = smooth_field(key.derive("layout"), h, w, spec.smoothness_px);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return layout.values()[a] < layout.values()[b];
  });
  std::vector<int> cover(n, kBuilt);
  const auto n_water = static_cast<std::size_t>(std::llround(spec.fractions.water * n));
  const auto n_veg = static_cast<std::size_t>(std::llround(spec.fractions.vegetation * n));
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_water) cover[order[i]] = kWater;
    else if (i < n_water + n_veg) cover[order[i]] = kVegetation;
  }

  std::array<Grid, 4> bands;
  for (std::size_t b = 0; b < 4; ++b) {
    const Grid vigor = smooth_field(key.derive("band", b), h, w, spec.smoothness_px / 2.0);
    Grid band(h, w);
    for (std::size_t i = 0; i < n; ++i) {
      band.values()[i] = kReflectance[cover[i]][b] * std::exp(0.2 * vigor.values()[i]);
    }
    // Sub-pixel mixing along class borders.
    bands[b] = smooth(band, 0.7);
  }
  const Grid& red = bands[0];
  const Grid& green = bands[1];
  const Grid& nir = bands[2];
  const Grid& swir = bands[3];
  IndexStack s{normalized_difference(nir, red), normalized_difference(green, nir),
               normalized_difference(swir, nir)};
  s.validate();
  return s;
}

Dataset generate_region(const RegionSpec& spec, std::size_t coarse_ratio) {
  spec.validate(coarse_ratio);
  Dataset d;
  d.spec = spec;
  d.indices_t1 = generate_indices(spec);
  const RngKey key = RngKey::from_seed(spec.seed).derive("lst");
  const std::size_t n = spec.height * spec.width;
  for (std::size_t t = 0; t < spec.dates(); ++t) {
    const auto noise = gaussian(key.derive("noise", t), n);
    Grid truth(spec.height, spec.width);
    const double base = spec.law.base_k + spec.date_offsets_k[t];
    for (std::size_t i = 0; i < n; ++i) {
      truth.values()[i] = base + spec.law.ndbi_gain * d.indices_t1.ndbi.values()[i] -
                          spec.law.ndvi_gain * d.indices_t1.ndvi.values()[i] -
                          spec.law.ndwi_gain * d.indices_t1.ndwi.values()[i] +
                          spec.law.noise_sigma * noise[i];
    }
    Grid coarse = block_aggregate(truth, coarse_ratio);
    for (double& v : coarse.values()) v += spec.sensor_bias_k;
    TargetSample s;
    s.obs.date = spec.name + "-d" + std::to_string(t);
    s.obs.x_coarse = std::move(coarse);
    s.obs.indices = d.indices_t1;
    s.truth_fine = std::move(truth);
    d.samples.push_back(std::move(s));
  }
  return d;
}

std::vector<Observation> Dataset::observations() const {
  std::vector<Observation> out;
  for (const auto& s : samples) out.push_back(s.obs);
  return out;
}

World generate_world(const WorldConfig& config) {
  World w;
  w.config = config;
  w.source = generate_region(config.source, config.coarse_ratio);
  for (const auto& t : config.targets) {
    if (t.name == config.source.name) throw ScenarioError("target reuses the source name");
    w.targets.push_back(generate_region(t, config.coarse_ratio));
  }
  return w;
}

namespace {

json region_to_json(const RegionSpec& r) {
  return {{"name", r.name},
          {"height", r.height},
          {"width", r.width},
          {"fractions",
           {{"built", r.fractions.built},
            {"vegetation", r.fractions.vegetation},
            {"water", r.fractions.water}}},
          {"law",
           {{"base_k", r.law.base_k},
            {"ndbi_gain", r.law.ndbi_gain},
            {"ndvi_gain", r.law.ndvi_gain},
            {"ndwi_gain", r.law.ndwi_gain},
            {"noise_sigma", r.law.noise_sigma}}},
          {"sensor_bias_k", r.sensor_bias_k},
          {"date_offsets_k", r.date_offsets_k},
          {"smoothness_px", r.smoothness_px},
          {"seed", r.seed}};
}

RegionSpec region_from_json(const json& j) {
  RegionSpec r;
  r.name = j.at("name").get<std::string>();
  r.height = j.at("height").get<std::size_t>();
  r.width = j.at("width").get<std::size_t>();
  const auto& f = j.at("fractions");
  r.fractions = {f.at("built").get<double>(), f.at("vegetation").get<double>(),
                 f.at("water").get<double>()};
  const auto& l = j.at("law");
  r.law = {l.at("base_k").get<double>(), l.at("ndbi_gain").get<double>(),
           l.at("ndvi_gain").get<double>(), l.at("ndwi_gain").get<double>(),
           l.at("noise_sigma").get<double>()};
  r.sensor_bias_k = j.at("sensor_bias_k").get<double>();
  r.date_offsets_k = j.at("date_offsets_k").get<std::vector<double>>();
  r.smoothness_px = j.at("smoothness_px").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

double fraction_distance(const LandCoverFractions& a, const LandCoverFractions& b) {
  return 0.5 * (std::abs(a.built - b.built) + std::abs(a.vegetation - b.vegetation) +
                std::abs(a.water - b.water));
}

json save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  const auto rdir = dir / d.spec.name;
  std::filesystem::create_directories(rdir);
  write_index_stack(d.indices_t1, rdir / "indices_t1");
  json dates = json::array();
  for (const auto& s : d.samples) {
    const std::string coarse = d.spec.name + "/" + s.obs.date + ".coarse.grd";
    const std::string truth = d.spec.name + "/" + s.obs.date + ".truth.grd";
    write_grid(s.obs.x_coarse, dir / coarse);
    write_grid(s.truth_fine, dir / truth);
    dates.push_back({{"date", s.obs.date}, {"coarse", coarse}, {"truth", truth}});
  }
  return {{"spec", region_to_json(d.spec)},
          {"indices_t1", d.spec.name + "/indices_t1"},
          {"dates", dates}};
}

json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "world.manifest.json");
  if (!in) throw ScenarioError("cannot open " + (dir / "world.manifest.json").string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ScenarioError("malformed world manifest: " + std::string(e.what()));
  }
}

const json& find_region(const json& manifest, const std::string& region) {
  if (manifest.at("source").at("spec").at("name") == region) return manifest.at("source");
  for (const auto& t : manifest.at("targets")) {
    if (t.at("spec").at("name") == region) return t;
  }
  throw ScenarioError("region '" + region + "' not in world manifest");
}

Dataset load_dataset(const json& j, const std::filesystem::path& dir, bool with_truth) {
  Dataset d;
  d.spec = region_from_json(j.at("spec"));
  d.indices_t1 = read_index_stack(dir / j.at("indices_t1").get<std::string>());
  for (const auto& e : j.at("dates")) {
    TargetSample s;
    s.obs.date = e.at("date").get<std::string>();
    s.obs.x_coarse = read_grid(dir / e.at("coarse").get<std::string>());
    s.obs.indices = d.indices_t1;
    if (with_truth) s.truth_fine = read_grid(dir / e.at("truth").get<std::string>());
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace

void save_world(const World& world, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json targets = json::array();
  for (const auto& t : world.targets) {
    json tj = save_dataset(t, dir);
    tj["shift"] = {
        {"fraction_distance", fraction_distance(t.spec.fractions, world.source.spec.fractions)},
        {"sensor_bias_k", t.spec.sensor_bias_k}};
    targets.push_back(std::move(tj));
  }
  const json manifest = {{"format", "lsttta-world-1"},
                         {"coarse_ratio", world.config.coarse_ratio},
                         {"source", save_dataset(world.source, dir)},
                         {"targets", targets}};
  std::ofstream out(dir / "world.manifest.json");
  if (!out) throw ScenarioError("cannot write world manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

World load_world(const std::filesystem::path& dir) {
  const json m = read_manifest(dir);
  World w;
  try {
    w.config.coarse_ratio = m.at("coarse_ratio").get<std::size_t>();
    w.source = load_dataset(m.at("source"), dir, true);
    w.config.source = w.source.spec;
    for (const auto& t : m.at("targets")) {
      w.targets.push_back(load_dataset(t, dir, true));
      w.config.targets.push_back(w.targets.back().spec);
    }
  } catch (const json::exception& e) {
    throw ScenarioError("malformed world manifest: " + std::string(e.what()));
  }
  return w;
}

std::vector<Observation> load_observations(const std::filesystem::path& dir,
                                           const std::string& region) {
  const json m = read_manifest(dir);
  try {
    return load_dataset(find_region(m, region), dir, false).observations();
  } catch (const json::exception& e) {
    throw ScenarioError("malformed world manifest: " + std::string(e.what()));
  }
}

PretrainReport pretrain(EfdModel& model, const Dataset& source, const PretrainConfig& config) {
  if (!model.initialized()) throw ScenarioError("pretraining needs an initialized model");
  if (source.samples.empty()) throw ScenarioError("source dataset is empty");
  PretrainReport report;
  const auto observations = source.observations();

  std::vector<Grid> coarse_on_fine;
  for (const auto& s : source.samples) {
    if (s.truth_fine.empty()) throw ScenarioError("pretraining needs source truth");
    coarse_on_fine.push_back(upsample_replicate(s.obs.x_coarse, coarse_ratio(s.obs)));
  }

  TtaConfig order;
  order.epochs = std::max<std::size_t>(config.epochs, 1);
  order.patch_size = config.patch_size;
  order.stride = config.stride;
  order.seed = config.seed;
  order.shuffle = true;
  const Schedule plan = schedule(observations, order);
  const DropoutPlan dropout(model.dropout_rate(),
                            RngKey::from_seed(config.seed).derive("pretrain-dropout"));
  const ParamRefs params = all_parameters(model);
  AdamHyper hyper;
  hyper.learning_rate = config.learning_rate;
  AdamState state;

  for (std::size_t e = 0; e < config.epochs; ++e) {
    double sum = 0.0;
    for (const auto& st : plan.epochs[e]) {
      const auto& a = st.anchor;
      const std::size_t sz = config.patch_size;
      ad::Tape tape;
      const BoundModel b = bind(tape, model, TrainScope::kAll);
      const InputTensors in =
          make_inputs(tape, model, coarse_on_fine[st.date].crop(a.row, a.col, sz, sz),
                      source.samples[st.date].obs.indices.crop(a.row, a.col, sz, sz));
      const Grid truth = source.samples[st.date].truth_fine.crop(a.row, a.col, sz, sz);
      ad::Var y = forward(b, in, &dropout, MaskKey{e, st.patch_id, 0});
      ad::Var diff = ad::sub(y, tape.constant(ad::Shape{1, sz, sz}, truth.values()));
      ad::Var mse = ad::reduce_mean(ad::mul(diff, diff));
      if (!std::isfinite(mse.item())) {
        throw ScenarioError("pretraining diverged at epoch " + std::to_string(e) +
                            ", patch " + std::to_string(st.patch_id));
      }
      sum += mse.item();
      adam_step(params, tape.backward(mse), state, hyper);
    }
    report.epoch_mse.push_back(sum / static_cast<double>(plan.epochs[e].size()));
  }

  double se = 0.0, se_mean = 0.0;
  std::size_t count = 0;
  for (const auto& s : source.samples) {
    const Grid pred = predict(model, upsample_replicate(s.obs.x_coarse, coarse_ratio(s.obs)),
                              s.obs.indices);
    const double r = rmse(pred, s.truth_fine);
    const double m = s.truth_fine.mean();
    se += r * r * static_cast<double>(pred.size());
    for (double v : s.truth_fine.values()) se_mean += (v - m) * (v - m);
    count += pred.size();
  }
  report.source_rmse = std::sqrt(se / static_cast<double>(count));
  report.mean_baseline_rmse = std::sqrt(se_mean / static_cast<double>(count));
  return report;
}

}  // namespace lsttta

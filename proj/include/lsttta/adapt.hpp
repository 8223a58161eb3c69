#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsttta/autodiff.hpp"
#include "lsttta/losses.hpp"
#include "lsttta/model.hpp"
#include "lsttta/sample.hpp"

namespace lsttta {

class AdaptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class StepMode { kPerPatch, kFullBatch };
enum class OptimizerKind { kAdam, kSgd };

struct AdamHyper {
  double learning_rate = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TtaConfig {
  LossWeights weights;
  std::size_t mc_samples = 10;
  std::size_t epochs = 10;
  std::size_t patch_size = 32;
  std::size_t stride = 8;
  AdamHyper adam;
  std::uint64_t seed = 0;
  StepMode step_mode = StepMode::kPerPatch;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  bool shuffle = false;
  std::size_t threads = 1;

  /// Throws std::invalid_argument on any broken invariant.
  void validate() const;
};

/// Named views onto model parameter storage.
using ParamRefs = std::map<std::string, std::span<double>>;

ParamRefs adaptable_parameters(EfdModel& model);
ParamRefs all_parameters(EfdModel& model);

struct AdamState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  std::uint64_t t = 0;
};

/// Bias-corrected Adam. `grads` must cover exactly the keys of `params`.
void adam_step(const ParamRefs& params, const ad::GradientMap& grads, AdamState& state,
               const AdamHyper& hyper);

/// w -= lr * g over the same key contract as adam_step.
void sgd_step(const ParamRefs& params, const ad::GradientMap& grads, double learning_rate);

struct PlanStep {
  std::size_t epoch = 0;
  std::size_t date = 0;
  PatchAnchor anchor;
  std::size_t patch_id = 0;  // position in the unshuffled per-epoch order
};

/// Epoch-major list of patch visits; dates outer, patches inner.
struct Schedule {
  std::vector<std::vector<PlanStep>> epochs;
  std::size_t patches_per_epoch() const { return epochs.empty() ? 0 : epochs[0].size(); }
  std::size_t total() const { return epochs.size() * patches_per_epoch(); }
};

Schedule schedule(std::span<const Observation> samples, const TtaConfig& config);

struct PatchRow {
  std::size_t epoch = 0;
  std::size_t patch_id = 0;
  LossBreakdown loss;
};

struct AdaptReport {
  std::vector<LossBreakdown> epoch_means;
  std::vector<PatchRow> patches;
  std::uint64_t frozen_checksum_before = 0;
  std::uint64_t frozen_checksum_after = 0;
  std::uint64_t optimizer_steps = 0;
};

/// Fine-lattice inputs and loss targets of one patch.
struct PatchData {
  Grid coarse_on_fine;
  IndexStack indices;
  Grid coarse_window;
};

/// Integer fine/coarse ratio of an observation; throws if not integral.
std::size_t coarse_ratio(const Observation& obs);

PatchData patch_data(const Observation& obs, const Grid& coarse_on_fine,
                     const PatchAnchor& anchor, std::size_t size);

/// Records the adaptation loss of one patch on `tape`.
TtaLoss patch_loss(ad::Tape& tape, const EfdModel& model, const PatchData& patch,
                   const TtaConfig& config, const DropoutPlan& plan, const MaskKey& key);

/// Updates only the adaptable parameters of `model` against the unsupervised
/// loss over all patches of all observations.
AdaptReport adapt(EfdModel& model, std::span<const Observation> samples,
                  const TtaConfig& config);

void write_losscurve_csv(const AdaptReport& report, const std::filesystem::path& path);
void write_patches_csv(const AdaptReport& report, const std::filesystem::path& path);

}  // namespace lsttta

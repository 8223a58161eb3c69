#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsttta/autodiff.hpp"
#include "lsttta/grid.hpp"
#include "lsttta/rng.hpp"

namespace lsttta {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One same-padded convolution: weight (out, in, k, k) and bias (out).
struct ConvLayer {
  std::string name;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::vector<double> weight;
  std::vector<double> bias;
  bool adaptable = false;

  std::size_t weight_count() const { return out_channels * in_channels * kernel * kernel; }
  std::size_t parameter_count() const { return weight_count() + out_channels; }
};

/// Reference encoder-fusion-decoder network.
///
///   coarse LST (1ch) -> conv3x3 1->8 + relu -> dropout --.
///                                                         concat -> conv1x1 16->8 + relu
///   indices (3ch)    -> conv3x3 3->8 + relu -> dropout --'          (fusion, adaptable)
///   -> conv3x3 8->8 + relu -> conv3x3 8->1 -> t_ref + t_scale * out
///
/// The coarse input is normalized as (x - t_ref) / t_scale before encoding.
/// The 1x1 fusion conv is the only place where the two branches mix, and is
/// the only block flagged adaptable.
class EfdModel {
 public:
  static constexpr std::size_t kWidth = 8;
  static constexpr std::size_t kLayerCount = 5;
  enum Layer : std::size_t { kEncoderCoarse, kEncoderFine, kFusion, kDecoderHidden, kDecoderOut };

  EfdModel() : EfdModel(0.1) {}
  explicit EfdModel(double dropout_rate, double t_ref = 300.0, double t_scale = 10.0);

  /// Fan-in scaled uniform init, weights in +-sqrt(6/fan_in), biases in +-1/sqrt(fan_in).
  void initialize(const RngKey& key);
  bool initialized() const { return initialized_; }
  void mark_initialized() { initialized_ = true; }

  double dropout_rate() const { return dropout_rate_; }
  void set_dropout_rate(double p);
  double t_ref() const { return t_ref_; }
  double t_scale() const { return t_scale_; }

  std::span<const ConvLayer> layers() const { return layers_; }
  std::span<ConvLayer> layers() { return layers_; }
  const ConvLayer& layer(Layer l) const { return layers_[l]; }
  ConvLayer& layer(Layer l) { return layers_[l]; }

  /// True when architecture, flags and scalars match (weights may differ).
  bool same_architecture(const EfdModel& other) const;

  friend bool operator==(const EfdModel& a, const EfdModel& b);

 private:
  std::array<ConvLayer, kLayerCount> layers_;
  double dropout_rate_;
  double t_ref_;
  double t_scale_;
  bool initialized_ = false;
};

/// Names of parameter tensors, split by the adaptable flag.
struct ParameterPartition {
  std::vector<std::string> frozen;
  std::vector<std::string> fusion;
  std::size_t frozen_count = 0;  // scalar parameters
  std::size_t fusion_count = 0;
};

ParameterPartition partition_parameters(const EfdModel& model);

/// FNV-1a over the bit patterns of every non-adaptable weight and bias.
std::uint64_t frozen_checksum(const EfdModel& model);

/// Which parameters get gradients on a tape.
enum class TrainScope { kNone, kFusion, kAll };

/// Model parameters registered on a tape.
struct BoundModel {
  const EfdModel* model = nullptr;
  std::array<ad::Var, EfdModel::kLayerCount> weight;
  std::array<ad::Var, EfdModel::kLayerCount> bias;
};

BoundModel bind(ad::Tape& tape, const EfdModel& model, TrainScope scope);

/// Parameter tensor name, "<layer>.weight" or "<layer>.bias".
std::string weight_name(const ConvLayer& l);
std::string bias_name(const ConvLayer& l);

/// Identifies one stochastic forward pass.
struct MaskKey {
  std::uint64_t epoch = 0;
  std::uint64_t patch = 0;
  std::uint64_t pass = 0;
};

/// Inverted-dropout masks as a pure function of (key, layer).
class DropoutPlan {
 public:
  DropoutPlan(double rate, RngKey base);
  double rate() const { return rate_; }
  std::vector<double> mask(const MaskKey& key, std::size_t layer, std::size_t n) const;

 private:
  double rate_;
  RngKey base_;
};

/// Model inputs on the fine lattice, as tape constants.
struct InputTensors {
  ad::Var coarse;   // (1, H, W), normalized
  ad::Var indices;  // (3, H, W)
};

InputTensors make_inputs(ad::Tape& tape, const EfdModel& model,
                         const Grid& coarse_on_fine, const IndexStack& indices);

struct Encoded {
  ad::Var coarse;
  ad::Var fine;
};

/// Encoder branches; deterministic (dropout sits after them).
Encoded encode(const BoundModel& m, const InputTensors& in);

/// Dropout + fusion + decoder. A null plan or rate 0 disables dropout.
ad::Var decode(const BoundModel& m, const Encoded& enc, const DropoutPlan* plan,
               const MaskKey& key);

/// One forward pass producing kelvin on the fine lattice, shape (1, H, W).
ad::Var forward(const BoundModel& m, const InputTensors& in, const DropoutPlan* plan,
                const MaskKey& key);

/// N stochastic passes on one tape, pass index 0..N-1 under `key_base`.
/// Throws ModelError if N < 2.
std::vector<ad::Var> mc_forward(const BoundModel& m, const InputTensors& in,
                                const DropoutPlan& plan, std::size_t n,
                                const MaskKey& key_base);

/// Deterministic prediction with dropout off.
Grid predict(const EfdModel& model, const Grid& coarse_on_fine, const IndexStack& indices);

/// Mean of N dropout passes.
Grid predict_mc_mean(const EfdModel& model, const Grid& coarse_on_fine,
                     const IndexStack& indices, const DropoutPlan& plan, std::size_t n);

// EFD1 checkpoint: ASCII header (meta scalars, one line per tensor with name,
// shape and trainable flag), "end", then little-endian doubles in header order.
void save_checkpoint(const EfdModel& model, const std::filesystem::path& path);
EfdModel load_checkpoint(const std::filesystem::path& path);

}  // namespace lsttta

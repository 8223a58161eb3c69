#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsttta::ad {

class AutodiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor dimensions. Rank 0 is a scalar, activations are (C, H, W),
/// conv weights (O, I, k, k).
struct Shape {
  std::vector<std::size_t> dims;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> d) : dims(d) {}
  explicit Shape(std::vector<std::size_t> d) : dims(std::move(d)) {}

  std::size_t rank() const { return dims.size(); }
  std::size_t size() const;
  std::size_t operator[](std::size_t i) const { return dims.at(i); }
  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;
};

class Tape;

/// Handle to a tensor recorded on a tape.
class Var {
 public:
  Var() = default;

  Tape& tape() const;
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const;
  std::span<const double> value() const;
  double item() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using GradientMap = std::map<std::string, std::vector<double>>;

/// Append-only record of tensor operations.
///
/// Nodes only reference earlier nodes, so reverse insertion order is a
/// valid topological order for backward(). A node requires a gradient iff
/// it is a trainable parameter, an input marked as such, or depends on one;
/// frozen parameters and constants never receive gradient buffers.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Shape shape, std::vector<double> values);
  Var constant(Shape shape, std::span<const double> values);

  /// Registers a named parameter. Only trainable ones appear in backward().
  Var parameter(const std::string& name, Shape shape,
                std::span<const double> values, bool trainable);

  /// Leaf that receives a gradient without being a named parameter.
  Var input(Shape shape, std::vector<double> values);

  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  /// Records an op result. `inputs` must already be on this tape.
  Var record(Shape shape, std::vector<double> values,
             std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Shape shape, std::vector<double> values, std::span<const Var> inputs,
             BackwardFn backward);

  /// Reverse sweep from a scalar loss. Returns gradients for every trainable
  /// parameter on the tape, zero-filled where the loss does not reach.
  GradientMap backward(Var loss);

  /// Gradient of any gradient-carrying node, valid after backward().
  std::span<const double> grad(Var v) const;

  const Shape& shape(std::size_t id) const { return nodes_.at(id).shape; }
  std::span<const double> value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  /// Gradient slot of a node during backward; empty when not required.
  std::vector<double>& grad_slot(std::size_t id) { return nodes_[id].grad; }

  std::size_t size() const { return nodes_.size(); }

  /// Number of Pearson evaluations that hit a zero-variance argument.
  std::size_t degenerate_pearson_count() const { return degenerate_pearson_; }
  void note_degenerate_pearson() { ++degenerate_pearson_; }

  void check_owned(Var v) const;

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::string param_name;
    bool trainable_param = false;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  std::size_t degenerate_pearson_ = 0;
};

// Differentiable primitives. All inputs must live on the same tape.

/// Same-padded stride-1 convolution; weight (O, C, k, k) with odd k, bias (O).
Var conv2d(Var x, Var weight, Var bias);
Var relu(Var x);
/// x * mask, mask treated as a constant.
Var dropout_with_mask(Var x, std::span<const double> mask);
Var concat_channels(Var a, Var b);
Var slice_channel(Var x, std::size_t channel);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scalar_mul(Var x, double s);
Var shift(Var x, double s);
/// (C, H, W) -> (C): mean over the spatial axes.
Var spatial_mean(Var x);
/// (C, H, W) -> (C, H/f, W/f) block means; constant blocks map to their value.
Var block_mean(Var x, std::size_t factor);
/// Any shape -> scalar mean of all elements.
Var reduce_mean(Var x);
/// Elementwise mean over a set of equally shaped tensors.
Var mean_over_set(std::span<const Var> xs);
/// Elementwise unbiased variance, 1/(N-1) sum (x_i - mean)^2. Needs N >= 2.
Var sample_variance_over_set(std::span<const Var> xs);
/// Pearson correlation of two equally sized tensors. A zero-variance argument
/// yields 0 with no gradient and bumps the tape's degenerate counter.
Var pearson_correlation(Var a, Var b);
/// |x| with subgradient 0 at 0.
Var abs_smooth(Var x);

}  // namespace lsttta::ad

#include "lsttta/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace lsttta::ad {

std::size_t Shape::size() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ')';
  return os.str();
}

Tape& Var::tape() const {
  if (!tape_) throw AutodiffError("use of an unbound tensor handle");
  return *tape_;
}
const Shape& Var::shape() const { return tape().shape(id_); }
std::span<const double> Var::value() const { return tape().value(id_); }
double Var::item() const {
  auto v = value();
  if (v.size() != 1) throw AutodiffError("item() on non-scalar " + shape().str());
  return v[0];
}

void Tape::check_owned(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw AutodiffError("tensor does not belong to this tape");
  }
}

Var Tape::push(Node node) {
  if (node.value.size() != node.shape.size()) {
    throw AutodiffError("value count does not match shape " + node.shape.str());
  }
  nodes_.push_back(std::move(node));
  backward_done_ = false;
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Shape shape, std::vector<double> values) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(values);
  return push(std::move(n));
}

Var Tape::constant(Shape shape, std::span<const double> values) {
  return constant(std::move(shape), std::vector<double>(values.begin(), values.end()));
}

Var Tape::parameter(const std::string& name, Shape shape,
                    std::span<const double> values, bool trainable) {
  for (const auto& n : nodes_) {
    if (!n.param_name.empty() && n.param_name == name) {
      throw AutodiffError("parameter '" + name + "' registered twice");
    }
  }
  Node n;
  n.shape = std::move(shape);
  n.value.assign(values.begin(), values.end());
  n.param_name = name;
  n.trainable_param = trainable;
  n.requires_grad = trainable;
  return push(std::move(n));
}

Var Tape::input(Shape shape, std::vector<double> values) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(values);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::record(Shape shape, std::vector<double> values,
                 std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(shape), std::move(values),
                std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(Shape shape, std::vector<double> values,
                 std::span<const Var> inputs, BackwardFn backward) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(values);
  for (const Var& in : inputs) {
    check_owned(in);
    n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

GradientMap Tape::backward(Var loss) {
  check_owned(loss);
  if (nodes_[loss.id_].value.size() != 1) {
    throw AutodiffError("backward needs a scalar loss, got " +
                        nodes_[loss.id_].shape.str());
  }
  for (auto& n : nodes_) {
    if (n.requires_grad) {
      n.grad.assign(n.value.size(), 0.0);
    } else {
      n.grad.clear();
    }
  }
  if (nodes_[loss.id_].requires_grad) {
    nodes_[loss.id_].grad[0] = 1.0;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      if (nodes_[i].requires_grad && nodes_[i].backward) nodes_[i].backward(*this, i);
    }
  }
  backward_done_ = true;

  GradientMap grads;
  for (const auto& n : nodes_) {
    if (n.trainable_param) grads.emplace(n.param_name, n.grad);
  }
  return grads;
}

std::span<const double> Tape::grad(Var v) const {
  check_owned(v);
  if (!backward_done_) throw AutodiffError("gradient requested before backward()");
  const Node& n = nodes_[v.id_];
  if (!n.requires_grad) throw AutodiffError("tensor carries no gradient");
  return n.grad;
}

namespace {

Tape& common_tape(Var a, Var b) {
  Tape& t = a.tape();
  t.check_owned(b);
  return t;
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw AutodiffError(std::string(op) + ": shape mismatch " + a.shape().str() +
                        " vs " + b.shape().str());
  }
}

void require_rank3(Var x, const char* op) {
  if (x.shape().rank() != 3) {
    throw AutodiffError(std::string(op) + ": expected (C,H,W), got " +
                        x.shape().str());
  }
}

/// Accumulates `scale * upstream` into the slot of `target` if it needs one.
void accumulate(Tape& t, std::size_t target, std::span<const double> upstream,
                double scale = 1.0) {
  if (!t.requires_grad(target)) return;
  auto& g = t.grad_slot(target);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * upstream[i];
}

}  // namespace

Var conv2d(Var x, Var weight, Var bias) {
  Tape& t = common_tape(x, weight);
  t.check_owned(bias);
  require_rank3(x, "conv2d");
  const Shape& ws = weight.shape();
  if (ws.rank() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0) {
    throw AutodiffError("conv2d: weight must be (O,C,k,k) with odd k, got " +
                        ws.str());
  }
  const std::size_t out_c = ws[0], in_c = ws[1], k = ws[2];
  if (x.shape()[0] != in_c) {
    throw AutodiffError("conv2d: input has " + std::to_string(x.shape()[0]) +
                        " channels, weight expects " + std::to_string(in_c));
  }
  if (bias.shape() != Shape{out_c}) {
    throw AutodiffError("conv2d: bias shape " + bias.shape().str());
  }
  const std::size_t h = x.shape()[1], w = x.shape()[2];
  const long pad = static_cast<long>(k / 2);
  const long lh = static_cast<long>(h), lw = static_cast<long>(w);

  auto xv = x.value();
  auto wv = weight.value();
  auto bv = bias.value();
  std::vector<double> out(out_c * h * w);
  for (std::size_t o = 0; o < out_c; ++o) {
    double* op = out.data() + o * h * w;
    std::fill(op, op + h * w, bv[o]);
    for (std::size_t i = 0; i < in_c; ++i) {
      const double* ip = xv.data() + i * h * w;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long dy = static_cast<long>(ky) - pad;
        const long y0 = std::max(0L, -dy), y1 = std::min(lh, lh - dy);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long dx = static_cast<long>(kx) - pad;
          const long x0 = std::max(0L, -dx), x1 = std::min(lw, lw - dx);
          const double wk = wv[((o * in_c + i) * k + ky) * k + kx];
          for (long y = y0; y < y1; ++y) {
            double* orow = op + y * lw;
            const double* irow = ip + (y + dy) * lw + dx;
            for (long xx = x0; xx < x1; ++xx) orow[xx] += wk * irow[xx];
          }
        }
      }
    }
  }

  const std::size_t xid = x.id(), wid = weight.id(), bid = bias.id();
  return t.record(
      Shape{out_c, h, w}, std::move(out), {x, weight, bias},
      [=](Tape& tp, std::size_t self) {
        const auto& go = tp.grad_slot(self);
        auto xv = tp.value(xid);
        auto wv = tp.value(wid);
        const bool need_x = tp.requires_grad(xid);
        const bool need_w = tp.requires_grad(wid);
        if (tp.requires_grad(bid)) {
          auto& gb = tp.grad_slot(bid);
          for (std::size_t o = 0; o < out_c; ++o) {
            double s = 0.0;
            for (std::size_t p = 0; p < h * w; ++p) s += go[o * h * w + p];
            gb[o] += s;
          }
        }
        if (!need_x && !need_w) return;
        std::vector<double>* gx = need_x ? &tp.grad_slot(xid) : nullptr;
        std::vector<double>* gw = need_w ? &tp.grad_slot(wid) : nullptr;
        for (std::size_t o = 0; o < out_c; ++o) {
          const double* gop = go.data() + o * h * w;
          for (std::size_t i = 0; i < in_c; ++i) {
            const double* ip = xv.data() + i * h * w;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long dy = static_cast<long>(ky) - pad;
              const long y0 = std::max(0L, -dy), y1 = std::min(lh, lh - dy);
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long dx = static_cast<long>(kx) - pad;
                const long x0 = std::max(0L, -dx), x1 = std::min(lw, lw - dx);
                const std::size_t widx = ((o * in_c + i) * k + ky) * k + kx;
                const double wk = wv[widx];
                double acc = 0.0;
                for (long y = y0; y < y1; ++y) {
                  const double* grow = gop + y * lw;
                  const long src = (y + dy) * lw + dx;
                  if (gw) {
                    const double* irow = ip + src;
                    for (long xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx];
                  }
                  if (gx) {
                    double* gxrow = gx->data() + i * h * w + src;
                    for (long xx = x0; xx < x1; ++xx) gxrow[xx] += wk * grow[xx];
                  }
                }
                if (gw) (*gw)[widx] += acc;
              }
            }
          }
        }
      });
}

Var relu(Var x) {
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  const std::size_t xid = x.id();
  return x.tape().record(x.shape(), std::move(out), {x},
                         [xid](Tape& tp, std::size_t self) {
                           if (!tp.requires_grad(xid)) return;
                           const auto& go = tp.grad_slot(self);
                           auto xv = tp.value(xid);
                           auto& gx = tp.grad_slot(xid);
                           for (std::size_t i = 0; i < gx.size(); ++i) {
                             if (xv[i] > 0.0) gx[i] += go[i];
                           }
                         });
}

Var dropout_with_mask(Var x, std::span<const double> mask) {
  auto xv = x.value();
  if (mask.size() != xv.size()) {
    throw AutodiffError("dropout mask has " + std::to_string(mask.size()) +
                        " entries for tensor " + x.shape().str());
  }
  std::vector<double> m(mask.begin(), mask.end());
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * m[i];
  const std::size_t xid = x.id();
  return x.tape().record(x.shape(), std::move(out), {x},
                         [xid, m = std::move(m)](Tape& tp, std::size_t self) {
                           if (!tp.requires_grad(xid)) return;
                           const auto& go = tp.grad_slot(self);
                           auto& gx = tp.grad_slot(xid);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += m[i] * go[i];
                         });
}

Var concat_channels(Var a, Var b) {
  Tape& t = common_tape(a, b);
  require_rank3(a, "concat_channels");
  require_rank3(b, "concat_channels");
  if (a.shape()[1] != b.shape()[1] || a.shape()[2] != b.shape()[2]) {
    throw AutodiffError("concat_channels: spatial mismatch " + a.shape().str() +
                        " vs " + b.shape().str());
  }
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.begin(), av.end());
  out.insert(out.end(), bv.begin(), bv.end());
  const std::size_t na = av.size(), aid = a.id(), bid = b.id();
  return t.record(Shape{a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]},
                  std::move(out), {a, b}, [=](Tape& tp, std::size_t self) {
                    const auto& go = tp.grad_slot(self);
                    std::span<const double> g(go);
                    accumulate(tp, aid, g.first(na));
                    accumulate(tp, bid, g.subspan(na));
                  });
}

Var slice_channel(Var x, std::size_t channel) {
  require_rank3(x, "slice_channel");
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (channel >= c) throw AutodiffError("slice_channel: channel out of range");
  auto xv = x.value().subspan(channel * h * w, h * w);
  const std::size_t xid = x.id();
  return x.tape().record(Shape{1, h, w}, std::vector<double>(xv.begin(), xv.end()),
                         {x}, [=](Tape& tp, std::size_t self) {
                           if (!tp.requires_grad(xid)) return;
                           const auto& go = tp.grad_slot(self);
                           auto& gx = tp.grad_slot(xid);
                           for (std::size_t i = 0; i < h * w; ++i) {
                             gx[channel * h * w + i] += go[i];
                           }
                         });
}

namespace {

template <class Fwd>
Var binary(Var a, Var b, const char* name, Fwd fwd, double sign_b) {
  Tape& t = common_tape(a, b);
  require_same_shape(a, b, name);
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
  const std::size_t aid = a.id(), bid = b.id();
  return t.record(a.shape(), std::move(out), {a, b},
                  [=](Tape& tp, std::size_t self) {
                    const auto& go = tp.grad_slot(self);
                    accumulate(tp, aid, go);
                    accumulate(tp, bid, go, sign_b);
                  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; }, 1.0);
}

Var sub(Var a, Var b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; }, -1.0);
}

Var mul(Var a, Var b) {
  Tape& t = common_tape(a, b);
  require_same_shape(a, b, "mul");
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t aid = a.id(), bid = b.id();
  return t.record(a.shape(), std::move(out), {a, b},
                  [=](Tape& tp, std::size_t self) {
                    const auto& go = tp.grad_slot(self);
                    auto av = tp.value(aid);
                    auto bv = tp.value(bid);
                    if (tp.requires_grad(aid)) {
                      auto& ga = tp.grad_slot(aid);
                      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bv[i];
                    }
                    if (tp.requires_grad(bid)) {
                      auto& gb = tp.grad_slot(bid);
                      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * av[i];
                    }
                  });
}

Var scalar_mul(Var x, double s) {
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = s * xv[i];
  const std::size_t xid = x.id();
  return x.tape().record(x.shape(), std::move(out), {x},
                         [=](Tape& tp, std::size_t self) {
                           accumulate(tp, xid, tp.grad_slot(self), s);
                         });
}

Var shift(Var x, double s) {
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + s;
  const std::size_t xid = x.id();
  return x.tape().record(x.shape(), std::move(out), {x},
                         [=](Tape& tp, std::size_t self) {
                           accumulate(tp, xid, tp.grad_slot(self));
                         });
}

Var spatial_mean(Var x) {
  require_rank3(x, "spatial_mean");
  const std::size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  if (hw == 0) throw AutodiffError("spatial_mean of an empty tensor");
  auto xv = x.value();
  std::vector<double> out(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += xv[ch * hw + p];
    out[ch] = s / static_cast<double>(hw);
  }
  const std::size_t xid = x.id();
  return x.tape().record(Shape{c}, std::move(out), {x},
                         [=](Tape& tp, std::size_t self) {
                           if (!tp.requires_grad(xid)) return;
                           const auto& go = tp.grad_slot(self);
                           auto& gx = tp.grad_slot(xid);
                           const double inv = 1.0 / static_cast<double>(hw);
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             for (std::size_t p = 0; p < hw; ++p) {
                               gx[ch * hw + p] += go[ch] * inv;
                             }
                           }
                         });
}

Var block_mean(Var x, std::size_t factor) {
  require_rank3(x, "block_mean");
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (factor == 0 || h % factor != 0 || w % factor != 0) {
    throw AutodiffError("block_mean: factor " + std::to_string(factor) +
                        " does not divide " + x.shape().str());
  }
  const std::size_t oh = h / factor, ow = w / factor;
  const double inv = 1.0 / static_cast<double>(factor * factor);
  auto xv = x.value();
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t col = 0; col < ow; ++col) {
        const double first = xv[(ch * h + r * factor) * w + col * factor];
        double sum = 0.0;
        bool constant = true;
        for (std::size_t dr = 0; dr < factor; ++dr) {
          for (std::size_t dc = 0; dc < factor; ++dc) {
            const double v = xv[(ch * h + r * factor + dr) * w + col * factor + dc];
            constant = constant && v == first;
            sum += v;
          }
        }
        out[(ch * oh + r) * ow + col] = constant ? first : sum * inv;
      }
    }
  }
  const std::size_t xid = x.id();
  return x.tape().record(Shape{c, oh, ow}, std::move(out), {x},
                         [=](Tape& tp, std::size_t self) {
                           if (!tp.requires_grad(xid)) return;
                           const auto& go = tp.grad_slot(self);
                           auto& gx = tp.grad_slot(xid);
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             for (std::size_t y = 0; y < h; ++y) {
                               for (std::size_t xx = 0; xx < w; ++xx) {
                                 gx[(ch * h + y) * w + xx] +=
                                     go[(ch * oh + y / factor) * ow + xx / factor] * inv;
                               }
                             }
                           }
                         });
}

Var reduce_mean(Var x) {
  auto xv = x.value();
  if (xv.empty()) throw AutodiffError("reduce_mean of an empty tensor");
  double s = 0.0;
  for (double v : xv) s += v;
  const double n = static_cast<double>(xv.size());
  const std::size_t xid = x.id();
  return x.tape().record(Shape{}, {s / n}, {x}, [=](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(xid)) return;
    const double g = tp.grad_slot(self)[0] / n;
    for (double& v : tp.grad_slot(xid)) v += g;
  });
}

namespace {

void check_set(std::span<const Var> xs, std::size_t min_count, const char* op) {
  if (xs.size() < min_count) {
    throw AutodiffError(std::string(op) + ": needs at least " +
                        std::to_string(min_count) + " tensors, got " +
                        std::to_string(xs.size()));
  }
  for (const Var& v : xs.subspan(1)) {
    xs[0].tape().check_owned(v);
    require_same_shape(xs[0], v, op);
  }
}

std::vector<double> set_mean(std::span<const Var> xs) {
  const auto first = xs[0].value();
  std::vector<double> mean(first.size(), 0.0);
  std::vector<char> constant(first.size(), 1);
  for (const Var& v : xs) {
    auto vv = v.value();
    for (std::size_t i = 0; i < mean.size(); ++i) {
      mean[i] += vv[i];
      constant[i] &= static_cast<char>(vv[i] == first[i]);
    }
  }
  // Pixels where every member agrees keep that value exactly, so identical
  // passes have zero spread rather than a rounding residue.
  const double inv = 1.0 / static_cast<double>(xs.size());
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = constant[i] ? first[i] : mean[i] * inv;
  return mean;
}

std::vector<std::size_t> ids_of(std::span<const Var> xs) {
  std::vector<std::size_t> ids;
  ids.reserve(xs.size());
  for (const Var& v : xs) ids.push_back(v.id());
  return ids;
}

}  // namespace

Var mean_over_set(std::span<const Var> xs) {
  check_set(xs, 1, "mean_over_set");
  auto mean = set_mean(xs);
  const double inv = 1.0 / static_cast<double>(xs.size());
  return xs[0].tape().record(xs[0].shape(), std::move(mean), xs,
                             [ids = ids_of(xs), inv](Tape& tp, std::size_t self) {
                               const auto& go = tp.grad_slot(self);
                               for (std::size_t id : ids) accumulate(tp, id, go, inv);
                             });
}

Var sample_variance_over_set(std::span<const Var> xs) {
  check_set(xs, 2, "sample_variance_over_set");
  const auto mean = set_mean(xs);
  const double denom = static_cast<double>(xs.size() - 1);
  std::vector<double> var(mean.size(), 0.0);
  for (const Var& v : xs) {
    auto vv = v.value();
    for (std::size_t i = 0; i < var.size(); ++i) {
      const double d = vv[i] - mean[i];
      var[i] += d * d;
    }
  }
  for (double& s : var) s /= denom;
  return xs[0].tape().record(
      xs[0].shape(), std::move(var), xs,
      [ids = ids_of(xs), mean, denom](Tape& tp, std::size_t self) {
        const auto& go = tp.grad_slot(self);
        // d/dx_j of sum_i (x_i - m)^2 is 2 (x_j - m); the mean term cancels.
        for (std::size_t id : ids) {
          if (!tp.requires_grad(id)) continue;
          auto xv = tp.value(id);
          auto& gx = tp.grad_slot(id);
          for (std::size_t i = 0; i < gx.size(); ++i) {
            gx[i] += go[i] * 2.0 * (xv[i] - mean[i]) / denom;
          }
        }
      });
}

Var pearson_correlation(Var a, Var b) {
  Tape& t = common_tape(a, b);
  if (a.value().size() != b.value().size()) {
    throw AutodiffError("pearson_correlation: size mismatch " + a.shape().str() +
                        " vs " + b.shape().str());
  }
  auto av = a.value();
  auto bv = b.value();
  const std::size_t n = av.size();
  if (n == 0) throw AutodiffError("pearson_correlation of empty tensors");
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += av[i];
    mb += bv[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  std::vector<double> da(n), db(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    da[i] = av[i] - ma;
    db[i] = bv[i] - mb;
    sab += da[i] * db[i];
    saa += da[i] * da[i];
    sbb += db[i] * db[i];
  }
  // Deviations at rounding level of the mean count as a constant argument.
  const auto flat = [n](double ss, double m) {
    const double tol = 1e-12 * std::max(1.0, std::abs(m));
    return ss <= static_cast<double>(n) * tol * tol;
  };
  if (flat(saa, ma) || flat(sbb, mb)) {
    t.note_degenerate_pearson();
    return t.constant(Shape{}, std::vector<double>{0.0});
  }
  const double norm = std::sqrt(saa * sbb);
  const double rho = sab / norm;
  const std::size_t aid = a.id(), bid = b.id();
  return t.record(Shape{}, {rho}, {a, b},
                  [=, da = std::move(da), db = std::move(db)](Tape& tp,
                                                              std::size_t self) {
                    const double g = tp.grad_slot(self)[0];
                    if (tp.requires_grad(aid)) {
                      auto& ga = tp.grad_slot(aid);
                      for (std::size_t i = 0; i < n; ++i) {
                        ga[i] += g * (db[i] / norm - rho * da[i] / saa);
                      }
                    }
                    if (tp.requires_grad(bid)) {
                      auto& gb = tp.grad_slot(bid);
                      for (std::size_t i = 0; i < n; ++i) {
                        gb[i] += g * (da[i] / norm - rho * db[i] / sbb);
                      }
                    }
                  });
}

Var abs_smooth(Var x) {
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::abs(xv[i]);
  const std::size_t xid = x.id();
  return x.tape().record(x.shape(), std::move(out), {x},
                         [xid](Tape& tp, std::size_t self) {
                           if (!tp.requires_grad(xid)) return;
                           const auto& go = tp.grad_slot(self);
                           auto xv = tp.value(xid);
                           auto& gx = tp.grad_slot(xid);
                           for (std::size_t i = 0; i < gx.size(); ++i) {
                             if (xv[i] > 0.0) gx[i] += go[i];
                             else if (xv[i] < 0.0) gx[i] -= go[i];
                           }
                         });
}

}  // namespace lsttta::ad

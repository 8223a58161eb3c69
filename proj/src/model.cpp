#include "lsttta/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lsttta {

namespace {

ConvLayer make_layer(std::string name, std::size_t in, std::size_t out,
                     std::size_t k, bool adaptable) {
  ConvLayer l;
  l.name = std::move(name);
  l.in_channels = in;
  l.out_channels = out;
  l.kernel = k;
  l.weight.assign(l.weight_count(), 0.0);
  l.bias.assign(out, 0.0);
  l.adaptable = adaptable;
  return l;
}

constexpr std::uint64_t kFnvOffset = 0xCBF29CE484222325ull;

std::uint64_t fnv_mix(std::uint64_t h, std::span<const double> values) {
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xFFu;
      h *= 0x100000001B3ull;
    }
  }
  return h;
}

std::string hex(double v) {
  std::ostringstream os;
  os << std::hexfloat << v;
  return os.str();
}

double parse_double(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0' || !std::isfinite(v)) {
    throw ModelError("checkpoint: bad value for " + what + ": '" + s + "'");
  }
  return v;
}

}  // namespace

EfdModel::EfdModel(double dropout_rate, double t_ref, double t_scale)
    : layers_{make_layer("encoder_coarse", 1, kWidth, 3, false),
              make_layer("encoder_fine", 3, kWidth, 3, false),
              make_layer("fusion", 2 * kWidth, kWidth, 1, true),
              make_layer("decoder_hidden", kWidth, kWidth, 3, false),
              make_layer("decoder_out", kWidth, 1, 3, false)},
      dropout_rate_(0.0),
      t_ref_(t_ref),
      t_scale_(t_scale) {
  set_dropout_rate(dropout_rate);
  if (!(t_scale > 0.0) || !std::isfinite(t_ref)) {
    throw ModelError("temperature normalization needs finite t_ref and t_scale > 0");
  }
}

void EfdModel::set_dropout_rate(double p) {
  if (!(p >= 0.0 && p < 1.0)) throw ModelError("dropout rate must lie in [0, 1)");
  dropout_rate_ = p;
}

void EfdModel::initialize(const RngKey& key) {
  for (auto& l : layers_) {
    const double fan_in = static_cast<double>(l.in_channels * l.kernel * l.kernel);
    const double wb = std::sqrt(6.0 / fan_in);
    const double bb = 1.0 / std::sqrt(fan_in);
    auto uw = uniform(key.derive(l.name + ".weight"), l.weight.size());
    auto ub = uniform(key.derive(l.name + ".bias"), l.bias.size());
    for (std::size_t i = 0; i < uw.size(); ++i) l.weight[i] = wb * (2.0 * uw[i] - 1.0);
    for (std::size_t i = 0; i < ub.size(); ++i) l.bias[i] = bb * (2.0 * ub[i] - 1.0);
  }
  initialized_ = true;
}

bool EfdModel::same_architecture(const EfdModel& other) const {
  for (std::size_t i = 0; i < kLayerCount; ++i) {
    const auto& a = layers_[i];
    const auto& b = other.layers_[i];
    if (a.name != b.name || a.in_channels != b.in_channels ||
        a.out_channels != b.out_channels || a.kernel != b.kernel ||
        a.adaptable != b.adaptable) {
      return false;
    }
  }
  return t_ref_ == other.t_ref_ && t_scale_ == other.t_scale_;
}

bool operator==(const EfdModel& a, const EfdModel& b) {
  if (!a.same_architecture(b) || a.dropout_rate_ != b.dropout_rate_) return false;
  for (std::size_t i = 0; i < EfdModel::kLayerCount; ++i) {
    if (a.layers_[i].weight != b.layers_[i].weight || a.layers_[i].bias != b.layers_[i].bias) {
      return false;
    }
  }
  return true;
}

std::string weight_name(const ConvLayer& l) { return l.name + ".weight"; }
std::string bias_name(const ConvLayer& l) { return l.name + ".bias"; }

ParameterPartition partition_parameters(const EfdModel& model) {
  ParameterPartition p;
  for (const auto& l : model.layers()) {
    auto& names = l.adaptable ? p.fusion : p.frozen;
    names.push_back(weight_name(l));
    names.push_back(bias_name(l));
    (l.adaptable ? p.fusion_count : p.frozen_count) += l.parameter_count();
  }
  return p;
}

std::uint64_t frozen_checksum(const EfdModel& model) {
  std::uint64_t h = kFnvOffset;
  for (const auto& l : model.layers()) {
    if (l.adaptable) continue;
    h = fnv_mix(h, l.weight);
    h = fnv_mix(h, l.bias);
  }
  return h;
}

BoundModel bind(ad::Tape& tape, const EfdModel& model, TrainScope scope) {
  if (!model.initialized()) throw ModelError("model weights are uninitialized");
  BoundModel b;
  b.model = &model;
  for (std::size_t i = 0; i < EfdModel::kLayerCount; ++i) {
    const auto& l = model.layers()[i];
    const bool trainable = scope == TrainScope::kAll ||
                           (scope == TrainScope::kFusion && l.adaptable);
    b.weight[i] = tape.parameter(
        weight_name(l), ad::Shape{l.out_channels, l.in_channels, l.kernel, l.kernel},
        l.weight, trainable);
    b.bias[i] = tape.parameter(bias_name(l), ad::Shape{l.out_channels}, l.bias, trainable);
  }
  return b;
}

DropoutPlan::DropoutPlan(double rate, RngKey base) : rate_(rate), base_(base) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ModelError("dropout rate must lie in [0, 1)");
}

std::vector<double> DropoutPlan::mask(const MaskKey& key, std::size_t layer,
                                      std::size_t n) const {
  const RngKey k = base_.derive("epoch", key.epoch)
                       .derive("patch", key.patch)
                       .derive("pass", key.pass)
                       .derive("layer", layer);
  return bernoulli_mask(k, n, rate_);
}

InputTensors make_inputs(ad::Tape& tape, const EfdModel& model,
                         const Grid& coarse_on_fine, const IndexStack& indices) {
  indices.validate();
  if (coarse_on_fine.height() != indices.height() ||
      coarse_on_fine.width() != indices.width()) {
    throw ModelError("coarse input and index stack differ in shape");
  }
  const std::size_t h = coarse_on_fine.height(), w = coarse_on_fine.width();
  std::vector<double> x(coarse_on_fine.values().begin(), coarse_on_fine.values().end());
  for (double& v : x) v = (v - model.t_ref()) / model.t_scale();
  std::vector<double> idx;
  idx.reserve(3 * h * w);
  for (std::size_t k = 0; k < 3; ++k) {
    auto v = indices[k].values();
    idx.insert(idx.end(), v.begin(), v.end());
  }
  return {tape.constant(ad::Shape{1, h, w}, std::move(x)),
          tape.constant(ad::Shape{3, h, w}, std::move(idx))};
}

namespace {
ad::Var conv(const BoundModel& m, std::size_t layer, ad::Var x) {
  return ad::conv2d(x, m.weight[layer], m.bias[layer]);
}
}  // namespace

Encoded encode(const BoundModel& m, const InputTensors& in) {
  if (in.coarse.shape().rank() != 3 || in.indices.shape().rank() != 3 ||
      in.coarse.shape()[1] != in.indices.shape()[1] ||
      in.coarse.shape()[2] != in.indices.shape()[2]) {
    throw ModelError("model inputs differ in spatial shape");
  }
  return {ad::relu(conv(m, EfdModel::kEncoderCoarse, in.coarse)),
          ad::relu(conv(m, EfdModel::kEncoderFine, in.indices))};
}

ad::Var decode(const BoundModel& m, const Encoded& enc, const DropoutPlan* plan,
               const MaskKey& key) {
  ad::Var c = enc.coarse;
  ad::Var f = enc.fine;
  if (plan && plan->rate() > 0.0) {
    c = ad::dropout_with_mask(c, plan->mask(key, 0, c.value().size()));
    f = ad::dropout_with_mask(f, plan->mask(key, 1, f.value().size()));
  }
  ad::Var fused = ad::relu(conv(m, EfdModel::kFusion, ad::concat_channels(c, f)));
  ad::Var hidden = ad::relu(conv(m, EfdModel::kDecoderHidden, fused));
  ad::Var out = conv(m, EfdModel::kDecoderOut, hidden);
  return ad::shift(ad::scalar_mul(out, m.model->t_scale()), m.model->t_ref());
}

ad::Var forward(const BoundModel& m, const InputTensors& in, const DropoutPlan* plan,
                const MaskKey& key) {
  return decode(m, encode(m, in), plan, key);
}

std::vector<ad::Var> mc_forward(const BoundModel& m, const InputTensors& in,
                                const DropoutPlan& plan, std::size_t n,
                                const MaskKey& key_base) {
  if (n < 2) throw ModelError("MC dropout needs at least 2 passes, got " + std::to_string(n));
  const Encoded enc = encode(m, in);
  std::vector<ad::Var> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    MaskKey k = key_base;
    k.pass = key_base.pass + i;
    out.push_back(decode(m, enc, &plan, k));
  }
  return out;
}

namespace {
Grid to_grid(ad::Var v) {
  const auto& s = v.shape();
  auto vals = v.value();
  return Grid(s[1], s[2], std::vector<double>(vals.begin(), vals.end()));
}
}  // namespace

Grid predict(const EfdModel& model, const Grid& coarse_on_fine, const IndexStack& indices) {
  ad::Tape tape;
  const BoundModel b = bind(tape, model, TrainScope::kNone);
  const InputTensors in = make_inputs(tape, model, coarse_on_fine, indices);
  return to_grid(forward(b, in, nullptr, {}));
}

Grid predict_mc_mean(const EfdModel& model, const Grid& coarse_on_fine,
                     const IndexStack& indices, const DropoutPlan& plan, std::size_t n) {
  ad::Tape tape;
  const BoundModel b = bind(tape, model, TrainScope::kNone);
  const InputTensors in = make_inputs(tape, model, coarse_on_fine, indices);
  auto passes = mc_forward(b, in, plan, n, {});
  return to_grid(ad::mean_over_set(passes));
}

void save_checkpoint(const EfdModel& model, const std::filesystem::path& path) {
  if (!model.initialized()) throw ModelError("refusing to save an uninitialized model");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelError("cannot open " + path.string() + " for writing");
  out << "EFD1\n";
  out << "meta dropout " << hex(model.dropout_rate()) << '\n';
  out << "meta t_ref " << hex(model.t_ref()) << '\n';
  out << "meta t_scale " << hex(model.t_scale()) << '\n';
  for (const auto& l : model.layers()) {
    out << "tensor " << weight_name(l) << " 4 " << l.out_channels << ' ' << l.in_channels
        << ' ' << l.kernel << ' ' << l.kernel << " trainable=" << l.adaptable << '\n';
    out << "tensor " << bias_name(l) << " 1 " << l.out_channels
        << " trainable=" << l.adaptable << '\n';
  }
  out << "end\n";
  const auto put = [&out](std::span<const double> vals) {
    for (double v : vals) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      char buf[8];
      for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
      out.write(buf, 8);
    }
  };
  for (const auto& l : model.layers()) {
    put(l.weight);
    put(l.bias);
  }
  if (!out) throw ModelError("write failed for " + path.string());
}

EfdModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError("cannot open " + path.string());
  const auto fail = [&path](const std::string& why) {
    return ModelError(path.string() + ": " + why);
  };
  std::string line;
  if (!std::getline(in, line) || line != "EFD1") throw fail("missing EFD1 magic");

  double dropout = 0.1, t_ref = 300.0, t_scale = 10.0;
  struct Entry {
    std::string name;
    std::vector<std::size_t> dims;
    bool trainable;
  };
  std::vector<Entry> entries;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key, value;
      if (!(ls >> key >> value)) throw fail("malformed meta line '" + line + "'");
      const double v = parse_double(value, key);
      if (key == "dropout") dropout = v;
      else if (key == "t_ref") t_ref = v;
      else if (key == "t_scale") t_scale = v;
      else throw fail("unknown meta key '" + key + "'");
    } else if (kind == "tensor") {
      Entry e;
      std::size_t rank = 0;
      if (!(ls >> e.name >> rank) || rank > 4) throw fail("malformed tensor line '" + line + "'");
      e.dims.resize(rank);
      for (auto& d : e.dims) {
        if (!(ls >> d)) throw fail("malformed tensor line '" + line + "'");
      }
      std::string flag;
      if (!(ls >> flag) || (flag != "trainable=0" && flag != "trainable=1")) {
        throw fail("missing trainable flag in '" + line + "'");
      }
      e.trainable = flag == "trainable=1";
      entries.push_back(std::move(e));
    } else {
      throw fail("unexpected header line '" + line + "'");
    }
  }
  if (!ended) throw fail("header has no end marker");

  EfdModel model(dropout, t_ref, t_scale);
  if (entries.size() != 2 * EfdModel::kLayerCount) {
    throw fail("expected " + std::to_string(2 * EfdModel::kLayerCount) +
               " tensors, found " + std::to_string(entries.size()));
  }
  const auto get = [&](std::vector<double>& dst) {
    std::vector<char> buf(dst.size() * 8);
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw fail("truncated payload");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i * 8 + b])) << (8 * b);
      }
      dst[i] = std::bit_cast<double>(bits);
      if (!std::isfinite(dst[i])) throw fail("non-finite weight");
    }
  };
  for (std::size_t i = 0; i < EfdModel::kLayerCount; ++i) {
    auto& l = model.layers()[i];
    const Entry& we = entries[2 * i];
    const Entry& be = entries[2 * i + 1];
    const std::vector<std::size_t> wdims{l.out_channels, l.in_channels, l.kernel, l.kernel};
    if (we.name != weight_name(l) || we.dims != wdims || be.name != bias_name(l) ||
        be.dims != std::vector<std::size_t>{l.out_channels}) {
      throw fail("architecture mismatch at layer '" + l.name + "'");
    }
    if (we.trainable != be.trainable) throw fail("layer '" + l.name + "' has mixed flags");
    l.adaptable = we.trainable;
  }
  for (auto& l : model.layers()) {
    get(l.weight);
    get(l.bias);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw fail("trailing bytes after payload");
  model.mark_initialized();
  return model;
}

}  // namespace lsttta

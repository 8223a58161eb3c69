#include "lsttta/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

namespace lsttta {

void TtaConfig::validate() const {
  weights.validate();
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (mc_samples < 2) throw std::invalid_argument("MC samples must be >= 2");
  if (!(adam.learning_rate >= 0.0) || !std::isfinite(adam.learning_rate)) {
    throw std::invalid_argument("learning rate must be finite and >= 0");
  }
  if (stride < 1 || patch_size < stride) {
    throw std::invalid_argument("need patch_size >= stride >= 1");
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) ||
      !(adam.epsilon > 0.0)) {
    throw std::invalid_argument("Adam needs beta1, beta2 in [0,1) and epsilon > 0");
  }
  if (threads < 1) throw std::invalid_argument("threads must be >= 1");
}

namespace {

void add_layer_refs(ParamRefs& refs, ConvLayer& l) {
  refs.emplace(weight_name(l), std::span<double>(l.weight));
  refs.emplace(bias_name(l), std::span<double>(l.bias));
}

void check_keys(const ParamRefs& params, const ad::GradientMap& grads) {
  if (params.size() != grads.size()) {
    throw AdaptError("gradient set has " + std::to_string(grads.size()) +
                     " tensors for " + std::to_string(params.size()) + " parameters");
  }
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw AdaptError("no gradient for parameter '" + name + "'");
    if (it->second.size() != p.size()) {
      throw AdaptError("gradient size mismatch for '" + name + "'");
    }
  }
}

}  // namespace

ParamRefs adaptable_parameters(EfdModel& model) {
  ParamRefs refs;
  for (auto& l : model.layers()) {
    if (l.adaptable) add_layer_refs(refs, l);
  }
  return refs;
}

ParamRefs all_parameters(EfdModel& model) {
  ParamRefs refs;
  for (auto& l : model.layers()) add_layer_refs(refs, l);
  return refs;
}

void adam_step(const ParamRefs& params, const ad::GradientMap& grads, AdamState& state,
               const AdamHyper& hyper) {
  check_keys(params, grads);
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (const auto& [name, p] : params) {
    const auto& g = grads.at(name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    m.resize(p.size(), 0.0);
    v.resize(p.size(), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= hyper.learning_rate * m_hat / (std::sqrt(v_hat) + hyper.epsilon);
    }
  }
}

void sgd_step(const ParamRefs& params, const ad::GradientMap& grads, double learning_rate) {
  check_keys(params, grads);
  for (const auto& [name, p] : params) {
    const auto& g = grads.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= learning_rate * g[i];
  }
}

std::size_t coarse_ratio(const Observation& obs) {
  const std::size_t fh = obs.indices.height(), fw = obs.indices.width();
  const std::size_t ch = obs.x_coarse.height(), cw = obs.x_coarse.width();
  if (ch == 0 || cw == 0 || fh % ch != 0 || fw % cw != 0 || fh / ch != fw / cw) {
    throw AdaptError("observation '" + obs.date + "': fine lattice " + std::to_string(fh) +
                     "x" + std::to_string(fw) + " is not an integer multiple of coarse " +
                     std::to_string(ch) + "x" + std::to_string(cw));
  }
  return fh / ch;
}

Schedule schedule(std::span<const Observation> samples, const TtaConfig& config) {
  std::vector<PlanStep> base;
  for (std::size_t d = 0; d < samples.size(); ++d) {
    for (const auto& a : extract_patches(samples[d].indices.height(),
                                         samples[d].indices.width(), config.patch_size,
                                         config.stride)) {
      base.push_back({0, d, a, base.size()});
    }
  }
  Schedule s;
  const RngKey shuffle_key = RngKey::from_seed(config.seed).derive("shuffle");
  for (std::size_t e = 0; e < config.epochs; ++e) {
    auto steps = base;
    for (auto& st : steps) st.epoch = e;
    if (config.shuffle && steps.size() > 1) {
      const RngKey k = shuffle_key.derive("epoch", e);
      for (std::size_t i = steps.size() - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(k.bits(i) % (i + 1));
        std::swap(steps[i], steps[j]);
      }
    }
    s.epochs.push_back(std::move(steps));
  }
  return s;
}

PatchData patch_data(const Observation& obs, const Grid& coarse_on_fine,
                     const PatchAnchor& a, std::size_t size) {
  const std::size_t ratio = coarse_ratio(obs);
  PatchData p{coarse_on_fine.crop(a.row, a.col, size, size),
              obs.indices.crop(a.row, a.col, size, size), Grid{}};
  if (a.row % ratio == 0 && a.col % ratio == 0 && size % ratio == 0) {
    p.coarse_window = obs.x_coarse.crop(a.row / ratio, a.col / ratio, size / ratio,
                                        size / ratio);
  } else {
    // Unaligned window: compare against the replicated coarse field instead.
    p.coarse_window = p.coarse_on_fine;
  }
  return p;
}

TtaLoss patch_loss(ad::Tape& tape, const EfdModel& model, const PatchData& patch,
                   const TtaConfig& config, const DropoutPlan& plan, const MaskKey& key) {
  const BoundModel b = bind(tape, model, TrainScope::kFusion);
  const InputTensors in = make_inputs(tape, model, patch.coarse_on_fine, patch.indices);
  const auto passes = mc_forward(b, in, plan, config.mc_samples, key);
  return tta_loss(passes, in.indices, patch.coarse_window, config.weights);
}

namespace {

struct PatchResult {
  LossBreakdown loss;
  ad::GradientMap grads;
};

void check_finite_loss(const LossBreakdown& l, const PlanStep& st, const Observation& obs) {
  const char* term = nullptr;
  if (!std::isfinite(l.uncertainty)) term = "uncertainty";
  else if (!std::isfinite(l.lulc)) term = "lulc";
  else if (!std::isfinite(l.bias)) term = "bias";
  else if (!std::isfinite(l.total)) term = "total";
  if (term) {
    throw AdaptError("non-finite " + std::string(term) + " loss at epoch " +
                     std::to_string(st.epoch) + ", patch " + std::to_string(st.patch_id) +
                     " (date '" + obs.date + "', anchor " + std::to_string(st.anchor.row) +
                     "," + std::to_string(st.anchor.col) + ")");
  }
}

}  // namespace

AdaptReport adapt(EfdModel& model, std::span<const Observation> samples,
                  const TtaConfig& config) {
  config.validate();
  if (samples.empty()) throw AdaptError("no target samples to adapt on");
  if (!model.initialized()) throw AdaptError("model is not initialized");

  AdaptReport report;
  report.frozen_checksum_before = frozen_checksum(model);

  std::vector<Grid> coarse_on_fine;
  for (const auto& obs : samples) {
    obs.indices.validate();
    coarse_on_fine.push_back(upsample_replicate(obs.x_coarse, coarse_ratio(obs)));
  }

  const Schedule plan_steps = schedule(samples, config);
  const DropoutPlan plan(model.dropout_rate(),
                         RngKey::from_seed(config.seed).derive("tta-dropout"));
  const ParamRefs params = adaptable_parameters(model);
  AdamState state;

  const auto evaluate_step = [&](const PlanStep& st) {
    ad::Tape tape;
    const PatchData pd =
        patch_data(samples[st.date], coarse_on_fine[st.date], st.anchor, config.patch_size);
    const TtaLoss l =
        patch_loss(tape, model, pd, config, plan, MaskKey{st.epoch, st.patch_id, 0});
    check_finite_loss(l.breakdown, st, samples[st.date]);
    return PatchResult{l.breakdown, tape.backward(l.total)};
  };
  const auto apply = [&](const ad::GradientMap& grads) {
    if (config.optimizer == OptimizerKind::kAdam) {
      adam_step(params, grads, state, config.adam);
    } else {
      sgd_step(params, grads, config.adam.learning_rate);
      ++state.t;
    }
  };

  for (const auto& epoch_steps : plan_steps.epochs) {
    std::vector<LossBreakdown> rows(epoch_steps.size());
    if (config.step_mode == StepMode::kPerPatch) {
      for (std::size_t i = 0; i < epoch_steps.size(); ++i) {
        PatchResult r = evaluate_step(epoch_steps[i]);
        rows[i] = r.loss;
        apply(r.grads);
      }
    } else {
      // Every patch sees the same weights; gradients averaged in index order.
      std::vector<PatchResult> results(epoch_steps.size());
      std::vector<std::exception_ptr> errors(config.threads);
      const auto worker = [&](std::size_t w) {
        try {
          for (std::size_t i = w; i < epoch_steps.size(); i += config.threads) {
            results[i] = evaluate_step(epoch_steps[i]);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      };
      if (config.threads == 1) {
        worker(0);
      } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < config.threads; ++w) pool.emplace_back(worker, w);
        for (auto& t : pool) t.join();
      }
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
      ad::GradientMap mean = results.front().grads;
      for (auto& [name, g] : mean) std::fill(g.begin(), g.end(), 0.0);
      for (std::size_t i = 0; i < results.size(); ++i) {
        rows[i] = results[i].loss;
        for (auto& [name, g] : mean) {
          const auto& gi = results[i].grads.at(name);
          for (std::size_t j = 0; j < g.size(); ++j) g[j] += gi[j];
        }
      }
      const double inv = 1.0 / static_cast<double>(results.size());
      for (auto& [name, g] : mean) {
        for (double& v : g) v *= inv;
      }
      apply(mean);
    }
    for (std::size_t i = 0; i < epoch_steps.size(); ++i) {
      report.patches.push_back({epoch_steps[i].epoch, epoch_steps[i].patch_id, rows[i]});
    }
    report.epoch_means.push_back(mean_breakdown(rows));
  }

  report.optimizer_steps = state.t;
  report.frozen_checksum_after = frozen_checksum(model);
  if (report.frozen_checksum_after != report.frozen_checksum_before) {
    throw AdaptError("frozen parameters changed during adaptation");
  }
  return report;
}

void write_losscurve_csv(const AdaptReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw AdaptError("cannot write " + path.string());
  out << "epoch,mean_uncertainty,mean_lulc,mean_bias,mean_total\n";
  for (std::size_t e = 0; e < report.epoch_means.size(); ++e) {
    const auto& m = report.epoch_means[e];
    out << e << ',' << format_double(m.uncertainty) << ',' << format_double(m.lulc) << ','
        << format_double(m.bias) << ',' << format_double(m.total) << '\n';
  }
}

void write_patches_csv(const AdaptReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw AdaptError("cannot write " + path.string());
  out << breakdown_csv_header() << '\n';
  for (const auto& r : report.patches) {
    out << breakdown_csv_row(r.epoch, r.patch_id, r.loss) << '\n';
  }
}

}  // namespace lsttta

// Command-line pipeline: genworld -> pretrain -> adapt -> evaluate -> report.

#include <malloc.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lsttta/adapt.hpp"
#include "lsttta/evalreport.hpp"
#include "lsttta/model.hpp"
#include "lsttta/rng.hpp"
#include "lsttta/scenario.hpp"

namespace fs = std::filesystem;
using namespace lsttta;

namespace {

struct Options {
  std::string root = "runs";
  std::string run_dir;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  std::size_t pretrain_epochs = 30;
  double pretrain_lr = 2e-3;

  std::vector<std::string> regions;
  TtaConfig tta;
  bool full_batch = false;
  bool sgd = false;

  std::size_t aggregation = 2;
  bool eval_mc = false;
};

// Settings that change any artifact. Thread count is excluded on purpose:
// results do not depend on it.
std::string canonical_config(const Options& o) {
  std::ostringstream s;
  s << "pretrain_epochs=" << o.pretrain_epochs << '\n'
    << "pretrain_lr=" << format_double(o.pretrain_lr) << '\n'
    << "epochs=" << o.tta.epochs << '\n'
    << "lr=" << format_double(o.tta.adam.learning_rate) << '\n'
    << "mc=" << o.tta.mc_samples << '\n'
    << "patch=" << o.tta.patch_size << '\n'
    << "stride=" << o.tta.stride << '\n'
    << "lambda=" << format_double(o.tta.weights.lambda1) << ','
    << format_double(o.tta.weights.lambda2) << ',' << format_double(o.tta.weights.lambda3) << '\n'
    << "adam=" << format_double(o.tta.adam.beta1) << ',' << format_double(o.tta.adam.beta2) << ','
    << format_double(o.tta.adam.epsilon) << '\n'
    << "full_batch=" << o.full_batch << "\nsgd=" << o.sgd << "\nshuffle=" << o.tta.shuffle << '\n'
    << "aggregation=" << o.aggregation << "\neval_mc=" << o.eval_mc << '\n';
  return s.str();
}

fs::path run_directory(const Options& o) {
  if (!o.run_dir.empty()) return o.run_dir;
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical_config(o))));
  return fs::path(o.root) / ("seed" + std::to_string(o.seed) + "-" + std::string(hash, 8));
}

TtaConfig tta_config(const Options& o) {
  TtaConfig c = o.tta;
  c.seed = o.seed;
  c.threads = o.threads;
  c.step_mode = o.full_batch ? StepMode::kFullBatch : StepMode::kPerPatch;
  c.optimizer = o.sgd ? OptimizerKind::kSgd : OptimizerKind::kAdam;
  return c;
}

EvalConfig eval_config(const Options& o) {
  EvalConfig c;
  c.aggregation_factor = o.aggregation;
  c.mode = o.eval_mc ? EvalMode::kMcMean : EvalMode::kDeterministic;
  c.mc_samples = o.tta.mc_samples;
  c.seed = o.seed;
  c.threads = o.threads;
  return c;
}

void require_file(const fs::path& p, const std::string& produced_by) {
  if (!fs::exists(p)) {
    throw std::runtime_error("missing " + p.string() + " (run '" + produced_by + "' first)");
  }
}

std::vector<std::string> target_regions(const Options& o, const fs::path& world) {
  if (!o.regions.empty()) return o.regions;
  require_file(world / "world.manifest.json", "genworld");
  std::ifstream in(world / "world.manifest.json");
  const auto j = nlohmann::json::parse(in);
  std::vector<std::string> out;
  for (const auto& t : j.at("targets")) out.push_back(t.at("spec").at("name").get<std::string>());
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

void cmd_genworld(const Options& o) {
  const fs::path run = run_directory(o);
  fs::create_directories(run);
  write_text(run / "config.txt", "seed=" + std::to_string(o.seed) + '\n' + canonical_config(o));
  const World w = generate_world(default_world(o.seed));
  save_world(w, run / "world");
  std::cout << "world written to " << (run / "world").string() << '\n';
}

void cmd_pretrain(const Options& o) {
  const fs::path run = run_directory(o);
  require_file(run / "world" / "world.manifest.json", "genworld");
  const World w = load_world(run / "world");
  EfdModel m;
  m.initialize(RngKey::from_seed(o.seed).derive("init"));
  PretrainConfig pc;
  pc.epochs = o.pretrain_epochs;
  pc.learning_rate = o.pretrain_lr;
  pc.seed = o.seed;
  const PretrainReport r = pretrain(m, w.source, pc);
  save_checkpoint(m, run / "checkpoint_before.efd1");
  std::ofstream log(run / "pretrain.csv");
  log << "epoch,mse\n";
  for (std::size_t e = 0; e < r.epoch_mse.size(); ++e) {
    log << e << ',' << format_double(r.epoch_mse[e]) << '\n';
  }
  log << "source_rmse," << format_double(r.source_rmse) << '\n'
      << "mean_baseline_rmse," << format_double(r.mean_baseline_rmse) << '\n';
  std::cout << "pretrained: source RMSE " << r.source_rmse << " K (per-date mean baseline "
            << r.mean_baseline_rmse << " K)\n";
}

void cmd_adapt(const Options& o) {
  const fs::path run = run_directory(o);
  require_file(run / "checkpoint_before.efd1", "pretrain");
  const TtaConfig cfg = tta_config(o);
  for (const auto& region : target_regions(o, run / "world")) {
    // Observations only: truth rasters are never opened on this path.
    const std::vector<Observation> obs = load_observations(run / "world", region);
    EfdModel m = load_checkpoint(run / "checkpoint_before.efd1");
    const AdaptReport rep = adapt(m, obs, cfg);
    const fs::path out = run / "adapt" / region;
    fs::create_directories(out);
    write_losscurve_csv(rep, out / "losscurve.csv");
    write_patches_csv(rep, out / "patches.csv");
    save_checkpoint(m, out / "checkpoint_after.efd1");
    std::cout << region << ": " << rep.optimizer_steps << " steps, loss "
              << rep.epoch_means.front().total << " -> " << rep.epoch_means.back().total << '\n';
  }
}

void cmd_evaluate(const Options& o) {
  const fs::path run = run_directory(o);
  require_file(run / "checkpoint_before.efd1", "pretrain");
  const World w = load_world(run / "world");
  const EfdModel before = load_checkpoint(run / "checkpoint_before.efd1");
  const EvalConfig ec = eval_config(o);
  std::vector<RegionComparison> cmps;
  std::ofstream dates(run / "metrics_by_date.csv");
  dates << "region,date,rmse_before,rmse_after,mae_before,mae_after\n";
  for (const auto& region : target_regions(o, run / "world")) {
    const Dataset* d = nullptr;
    for (const auto& t : w.targets) {
      if (t.spec.name == region) d = &t;
    }
    if (!d) throw ScenarioError("region '" + region + "' not in world");
    const fs::path after = run / "adapt" / region / "checkpoint_after.efd1";
    require_file(after, "adapt");
    cmps.push_back(compare(before, load_checkpoint(after), *d, ec));
    const auto& c = cmps.back();
    for (std::size_t i = 0; i < c.before.dates.size(); ++i) {
      dates << region << ',' << c.before.dates[i].date << ','
            << format_double(c.before.dates[i].rmse) << ','
            << format_double(c.after.dates[i].rmse) << ','
            << format_double(c.before.dates[i].mae) << ','
            << format_double(c.after.dates[i].mae) << '\n';
    }
  }
  const auto rows = metric_rows(cmps);
  write_metrics_csv(rows, run / "metrics.csv");
  std::cout << render_table(rows);
}

void cmd_report(const Options& o) {
  const fs::path run = run_directory(o);
  require_file(run / "metrics.csv", "evaluate");
  const auto rows = read_metrics_csv(run / "metrics.csv");
  std::ostringstream text;
  text << "Before/after adaptation (aggregated RMSE and MAE in kelvin)\n\n"
       << render_table(rows) << '\n';

  std::ofstream curves(run / "losscurves.csv");
  curves << "region,epoch,mean_uncertainty,mean_lulc,mean_bias,mean_total\n";
  text << "Adaptation loss, first -> last epoch\n";
  for (const auto& region : target_regions(o, run / "world")) {
    const fs::path p = run / "adapt" / region / "losscurve.csv";
    require_file(p, "adapt");
    std::ifstream in(p);
    std::string line, first, last;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      curves << region << ',' << line << '\n';
      if (first.empty()) first = line;
      last = line;
    }
    const auto total = [](const std::string& l) { return l.substr(l.rfind(',') + 1); };
    text << "  " << region << ": " << total(first) << " -> " << total(last) << '\n';
  }
  write_text(run / "report.txt", text.str());
  std::cout << text.str();
}

void emit_error(const std::string& command, const std::string& kind, const std::string& what) {
  nlohmann::json j{{"status", "error"}, {"command", command}, {"kind", kind}, {"message", what}};
  std::cerr << j.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  // The tape allocates many mid-sized buffers; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 28);
  mallopt(M_TRIM_THRESHOLD, 1 << 28);

  Options o;
  CLI::App app{"Test-time adaptation of a fine-scale LST fusion model on synthetic worlds"};
  app.require_subcommand(1, 1);
  app.set_config("--config", "", "key = value file; command-line flags take precedence");

  app.add_option("--root", o.root, "Parent of per-run directories")->capture_default_str();
  app.add_option("--run-dir", o.run_dir, "Explicit run directory (overrides seed/config naming)");
  app.add_option("--seed", o.seed, "Master seed")->capture_default_str();
  app.add_option("--threads", o.threads, "Worker threads; results do not depend on it")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  app.add_option("--pretrain-epochs", o.pretrain_epochs, "Supervised source epochs")
      ->capture_default_str();
  app.add_option("--pretrain-lr", o.pretrain_lr, "Supervised source learning rate")
      ->capture_default_str();

  app.add_option("--region", o.regions, "Target region(s); default all in the world");
  app.add_option("--epochs", o.tta.epochs, "Adaptation epochs (published setting: 10)")
      ->capture_default_str();
  app.add_option("--lr", o.tta.adam.learning_rate, "Adam learning rate (published setting: 4e-4)")
      ->capture_default_str();
  app.add_option("--mc", o.tta.mc_samples, "MC dropout passes per patch")->capture_default_str();
  app.add_option("--patch", o.tta.patch_size, "Patch size in fine pixels")->capture_default_str();
  app.add_option("--stride", o.tta.stride, "Patch stride in fine pixels")->capture_default_str();
  app.add_option("--lambda1", o.tta.weights.lambda1,
                 "Uncertainty weight (published setting: 0.65)")
      ->capture_default_str();
  app.add_option("--lambda2", o.tta.weights.lambda2,
                 "LULC-consistency weight (published setting: 0.30)")
      ->capture_default_str();
  app.add_option("--lambda3", o.tta.weights.lambda3, "Bias weight (published setting: 0.25)")
      ->capture_default_str();
  app.add_option("--beta1", o.tta.adam.beta1, "Adam beta1")->capture_default_str();
  app.add_option("--beta2", o.tta.adam.beta2, "Adam beta2")->capture_default_str();
  app.add_option("--adam-eps", o.tta.adam.epsilon, "Adam epsilon")->capture_default_str();
  app.add_flag("--full-batch", o.full_batch, "One optimizer step per epoch over all patches");
  app.add_flag("--sgd", o.sgd, "Plain gradient descent instead of Adam");
  app.add_flag("--shuffle", o.tta.shuffle, "Seeded shuffle of patches within each epoch");

  app.add_option("--agg", o.aggregation, "Evaluation aggregation factor")->capture_default_str();
  app.add_flag("--eval-mc", o.eval_mc, "Evaluate the MC-dropout mean instead of one clean pass");

  struct Command {
    const char* name;
    const char* help;
    void (*run)(const Options&);
  };
  const std::vector<Command> commands{
      {"genworld", "Generate the synthetic source and target regions", cmd_genworld},
      {"pretrain", "Train the reference model on the labelled source", cmd_pretrain},
      {"adapt", "Adapt the fusion layer on unlabelled target observations", cmd_adapt},
      {"evaluate", "Score before/after checkpoints and write metrics.csv", cmd_evaluate},
      {"report", "Assemble the comparison table and loss curves", cmd_report},
  };
  for (const auto& c : commands) app.add_subcommand(c.name, c.help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("parse", "usage", e.what());
    return 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    for (const auto& c : commands) {
      if (name == c.name) c.run(o);
    }
  } catch (const GridError& e) {
    emit_error(name, "grid", e.what());
    return 1;
  } catch (const ModelError& e) {
    emit_error(name, "model", e.what());
    return 1;
  } catch (const AdaptError& e) {
    emit_error(name, "adapt", e.what());
    return 1;
  } catch (const ScenarioError& e) {
    emit_error(name, "scenario", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    emit_error(name, "config", e.what());
    return 1;
  } catch (const std::exception& e) {
    emit_error(name, "runtime", e.what());
    return 1;
  }
  return 0;
}

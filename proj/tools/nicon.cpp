// Command-line driver: dataset generation, training, closed-loop evaluation,
// iterative learning, MC-dropout maps and phase portraits.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "nicon/config.hpp"
#include "nicon/errors.hpp"
#include "nicon/evaluation.hpp"
#include "nicon/svg.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace nicon {
namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> rounds;
  std::string baseline;    // empty: learned controller
  std::string checkpoint;  // directory holding controller.json
  std::string data;        // directory holding train.csv / val.csv
  std::string source = "closed_loop";
};

void write_json(const ordered_json& doc, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingFileError(path.string());
  out << doc.dump(2) << '\n';
}

ordered_json vec_json(const Vec& v) {
  ordered_json a = ordered_json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

fs::path prepare_out(const Options& o) {
  const fs::path out(o.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw MissingFileError(out.string());
  return out;
}

fs::path checkpoint_dir(const Options& o) {
  return o.checkpoint.empty() ? fs::path(o.out) : fs::path(o.checkpoint);
}

Mat lqr_weight(const Vec& diag, int dim) {
  return diag.size() == 0 ? Mat(Mat::Identity(dim, dim)) : Mat(diag.asDiagonal());
}

// Controller named by --baseline, or the learned one from the checkpoint.
Controller pick_controller(const ExperimentConfig& cfg, const PlantSpec& plant,
                           const Options& o, std::string* label) {
  if (o.baseline == "zero") {
    *label = "zero";
    return zero_controller(plant);
  }
  if (o.baseline == "lqr") {
    *label = "lqr";
    const LqrGain gain = lqr_gain(plant, lqr_weight(cfg.lqr.q_diag, plant.n),
                                  lqr_weight(cfg.lqr.r_diag, plant.m), cfg.lqr.h);
    spdlog::info("LQR gain converged in {} iterations", gain.iterations);
    return lqr_controller(gain, plant);
  }
  if (!o.baseline.empty()) {
    throw ConfigError("expected lqr or zero", "--baseline");
  }
  *label = "learned";
  return learned_controller(load_controller(checkpoint_dir(o) / "controller.json"));
}

DatasetSplits load_or_generate(const ExperimentConfig& cfg, const PlantSpec& plant,
                               const Options& o) {
  if (!o.data.empty()) {
    const fs::path dir(o.data);
    DatasetSplits data{read_dataset(dir / "train.csv", plant), read_dataset(dir / "val.csv", plant)};
    data.val.split = Split::kVal;
    return data;
  }
  return generate_splits(plant, cfg.train_samples, cfg.val_samples, cfg.train.seed,
                         plant.state_domain);
}

void write_training_outputs(const TrainedModels& models, const fs::path& dir) {
  save_controller(models.controller, dir / "controller.json");
  save_checkpoint(models.ghat, dir / "ghat.json");
  write_loss_curves(models.report, dir / "loss_curves.csv");
}

ordered_json stage_json(const StageReport& r) {
  return {{"best_epoch", r.best_epoch},
          {"best_val_loss", r.best_val},
          {"final_train_loss", r.train_loss.empty() ? 0.0 : r.train_loss.back()},
          {"final_val_loss", r.val_loss.empty() ? 0.0 : r.val_loss.back()},
          {"clip_events", r.clip_events}};
}

ordered_json roa_json(const RoaEstimate& roa, const std::string& controller) {
  return {{"controller", controller},
          {"samples", roa.initial_states.size()},
          {"membership", roa.membership},
          {"min_membership", roa.min_membership},
          {"valid", roa.valid},
          {"energy_threshold", roa.energy_threshold},
          {"final_radius", roa.final_radius}};
}

int cmd_generate(const ExperimentConfig& cfg, const Options& o) {
  const PlantSpec plant = cfg.make_plant();
  const fs::path out = prepare_out(o);
  const DatasetSplits data = generate_splits(plant, cfg.train_samples, cfg.val_samples,
                                             cfg.train.seed, plant.state_domain);
  write_dataset(data.train, out / "train.csv");
  write_dataset(data.val, out / "val.csv");
  spdlog::info("wrote {} train and {} val samples to {}", data.train.samples.size(),
               data.val.samples.size(), out.string());
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, const Options& o) {
  const PlantSpec plant = cfg.make_plant();
  const fs::path out = prepare_out(o);
  const DatasetSplits data = load_or_generate(cfg, plant, o);
  const TrainedModels models = train_all(data, cfg.train);
  write_training_outputs(models, out);
  ordered_json summary = {{"experiment", cfg.name},
                          {"plant", plant.name},
                          {"seed", models.report.seed},
                          {"ghat", stage_json(models.report.ghat)},
                          {"controller", stage_json(models.report.controller)},
                          {"wall_seconds", models.report.wall_seconds}};
  write_json(summary, out / "train_summary.json");
  spdlog::info("stage 1 val {:.3g}, stage 2 val {:.3g}", models.report.ghat.best_val,
               models.report.controller.best_val);
  return 0;
}

int cmd_simulate(const ExperimentConfig& cfg, const Options& o) {
  if (cfg.initial_states.empty()) {
    throw ConfigError("no initial states to simulate", "initial_states");
  }
  const PlantSpec plant = cfg.make_plant();
  const fs::path out = prepare_out(o);
  std::string label;
  const Controller controller = pick_controller(cfg, plant, o, &label);
  ordered_json runs = ordered_json::array();
  for (std::size_t k = 0; k < cfg.initial_states.size(); ++k) {
    const Trajectory traj = simulate_closed_loop(plant, controller, cfg.initial_states[k],
                                                 cfg.stability.q, cfg.roa.thresholds.sim);
    const std::string file = fmt::format("trajectory_{}.csv", k);
    write_trajectory(traj, out / file);
    runs.push_back({{"file", file},
                    {"x0", vec_json(cfg.initial_states[k])},
                    {"final_state", vec_json(traj.final_state())},
                    {"left_domain", traj.left_domain},
                    {"V_running_avg", traj.lyapunov_running_avg}});
  }
  write_json({{"controller", label}, {"runs", runs}}, out / "simulate_summary.json");
  return 0;
}

int cmd_roa(const ExperimentConfig& cfg, const Options& o) {
  const PlantSpec plant = cfg.make_plant();
  const fs::path out = prepare_out(o);
  std::string label;
  const Controller controller = pick_controller(cfg, plant, o, &label);
  Rng rng(o.seed.value_or(cfg.roa.seed), 60);
  const std::vector<Vec> states =
      sample_states(plant.state_domain.scaled(cfg.roa.region_scale), cfg.roa.samples, rng);
  const RoaEstimate roa =
      estimate_roa(plant, controller, states, cfg.stability.q, cfg.roa.thresholds);
  write_roa(roa, out / "roa.csv");
  const RoaEstimate slice = estimate_roa(
      plant, controller,
      slice_grid(plant.state_domain, cfg.roa.slice_x, cfg.roa.slice_y,
                 cfg.roa.slice_resolution),
      cfg.stability.q, cfg.roa.thresholds);
  write_roa(slice, out / "roa_slice.csv");
  ordered_json summary = roa_json(roa, label);
  summary["slice_membership"] = slice.membership;
  summary["slice_points"] = slice.initial_states.size();
  write_json(summary, out / "roa_summary.json");
  spdlog::info("{} controller: {}/{} converged{}", label, roa.membership,
               roa.initial_states.size(), roa.valid ? "" : " (invalid controller)");
  return 0;
}

int cmd_iterate(const ExperimentConfig& cfg, const Options& o) {
  const PlantSpec plant = cfg.make_plant();
  const fs::path out = prepare_out(o);
  IterationConfig it;
  it.rounds = o.rounds.value_or(cfg.iterate.rounds);
  it.initial_domain = plant.state_domain.scaled(cfg.iterate.initial_scale);
  it.train_samples = cfg.train_samples;
  it.val_samples = cfg.val_samples;
  it.roa_samples = cfg.roa.samples;
  it.shrink = cfg.iterate.shrink;
  it.policy_fraction = cfg.iterate.policy_fraction;
  it.roa_seed = cfg.roa.seed;
  const IterationResult result = iterative_learning(plant, cfg.train, cfg.roa.thresholds, it);
  ordered_json rounds = ordered_json::array();
  for (std::size_t k = 0; k < result.rounds.size(); ++k) {
    const RoundResult& r = result.rounds[k];
    const fs::path dir = out / fmt::format("round_{}", k + 1);
    fs::create_directories(dir);
    write_training_outputs(r.models, dir);
    write_roa(r.roa, dir / "roa.csv");
    ordered_json entry = roa_json(r.roa, "learned");
    entry["round"] = k + 1;
    entry["training_domain"] = {{"lo", vec_json(r.training_domain.lo)},
                                {"hi", vec_json(r.training_domain.hi)}};
    entry["stage2_best_val"] = r.models.report.controller.best_val;
    write_json(entry, dir / "roa_summary.json");
    rounds.push_back(entry);
  }
  write_json({{"rounds", rounds}, {"halted", result.halted}, {"diagnostic", result.diagnostic}},
             out / "iterate_summary.json");
  if (result.halted) spdlog::warn("{}", result.diagnostic);
  return 0;
}

int cmd_mc_dropout(const ExperimentConfig& cfg, const Options& o) {
  const PlantSpec plant = cfg.make_plant();
  const fs::path out = prepare_out(o);
  const ControllerModel model = load_controller(checkpoint_dir(o) / "controller.json");
  if (cfg.train.dropout.p_drop <= 0.0) {
    spdlog::warn("train.dropout is 0; MC-dropout expects a controller trained with dropout");
  }
  const McDropoutConfig& mc = cfg.mc_dropout;
  const std::vector<Vec> grid =
      slice_grid(plant.state_domain, mc.dim_x, mc.dim_y, mc.resolution);
  const std::vector<double> prob =
      mc_dropout_map(plant, model, mc.p_drop, grid, mc.runs, cfg.stability.q,
                     cfg.roa.thresholds, o.seed.value_or(mc.seed));
  std::ofstream csv(out / "mc_dropout.csv", std::ios::binary);
  if (!csv) throw MissingFileError((out / "mc_dropout.csv").string());
  csv << fmt::format("x{},x{},failure_probability\n", mc.dim_x, mc.dim_y);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    csv << fmt::format("{:.17g},{:.17g},{:.17g}\n", grid[k][mc.dim_x], grid[k][mc.dim_y],
                       prob[k]);
  }
  return 0;
}

int cmd_phase_portrait(const ExperimentConfig& cfg, const Options& o) {
  const PlantSpec plant = cfg.make_plant();
  const fs::path out = prepare_out(o);
  const PhasePortraitConfig& pp = cfg.phase_portrait;
  SimOptions sim = cfg.roa.thresholds.sim;
  sim.horizon = pp.horizon;
  const std::vector<Vec> starts = slice_grid(plant.state_domain, pp.dim_x, pp.dim_y, pp.resolution);

  std::vector<Trajectory> trajectories;
  std::string title;
  if (o.source == "hypothesis") {
    StabilityHead head;
    const fs::path ckpt = checkpoint_dir(o) / "controller.json";
    if (!o.checkpoint.empty()) {
      head = load_controller(ckpt).head;
      title = "learned stable hypothesis";
    } else {
      Rng rng(o.seed.value_or(cfg.train.seed), 70);
      head = make_stability_head(cfg.stability, cfg.train.hidden, rng);
      title = "untrained stable hypothesis";
    }
    const VectorField field = [&](const Vec& x) {
      return stable_hypothesis(cfg.stability, head, x);
    };
    SimOptions fine = sim;
    fine.step = std::min(sim.step, stable_hypothesis_step_limit(cfg.stability));
    for (const auto& x0 : starts) {
      trajectories.push_back(simulate_field(field, x0, cfg.stability.q, fine));
    }
  } else if (o.source == "closed_loop") {
    std::string label;
    const Controller controller = pick_controller(cfg, plant, o, &label);
    title = label + " closed loop";
    for (const auto& x0 : starts) {
      trajectories.push_back(simulate_closed_loop(plant, controller, x0, cfg.stability.q, sim));
    }
  } else {
    throw ConfigError("expected hypothesis or closed_loop", "--source");
  }

  std::vector<Polyline> lines;
  for (const auto& traj : trajectories) {
    Polyline line;
    // ~200 vertices per line keeps the file small without visible kinks
    const std::size_t stride = std::max<std::size_t>(1, traj.states.size() / 200);
    for (std::size_t k = 0; k < traj.states.size(); ++k) {
      if (k % stride != 0 && k + 1 != traj.states.size()) continue;
      line.x.push_back(traj.states[k][pp.dim_x]);
      line.y.push_back(traj.states[k][pp.dim_y]);
    }
    const bool settled = !traj.left_domain && traj.energy.back() <= 1e-2 * traj.energy.front();
    line.color = settled ? "#1f77b4" : "#d62728";
    lines.push_back(std::move(line));
  }
  PlotFrame frame;
  frame.x_min = plant.state_domain.lo[pp.dim_x];
  frame.x_max = plant.state_domain.hi[pp.dim_x];
  frame.y_min = plant.state_domain.lo[pp.dim_y];
  frame.y_max = plant.state_domain.hi[pp.dim_y];
  frame.x_label = fmt::format("x{}", pp.dim_x);
  frame.y_label = fmt::format("x{}", pp.dim_y);
  frame.title = fmt::format("{}: {}", plant.name, title);
  write_svg(lines, frame, out / "phase_portrait.svg");
  return 0;
}

int exit_code(const Error& e) {
  if (e.kind() == "config") return 2;
  if (e.kind() == "missing_file") return 3;
  return 1;
}

}  // namespace
}  // namespace nicon

int main(int argc, char** argv) {
  using namespace nicon;
  spdlog::set_default_logger(spdlog::stderr_color_st("nicon"));
  spdlog::set_pattern("[%l] %v");

  CLI::App app{"Learn and evaluate stabilizing controllers for black-box plants"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config, "Experiment config (JSON)")->required();
    cmd->add_option("--out", o.out, "Output directory")->required();
    cmd->add_option("--seed", o.seed, "Override the command's seed");
  };
  auto with_controller = [&](CLI::App* cmd) {
    cmd->add_option("--baseline", o.baseline, "Use a baseline controller instead of the learned one")
        ->check(CLI::IsMember({"lqr", "zero"}));
    cmd->add_option("--checkpoint", o.checkpoint,
                    "Directory with controller.json (default: --out)");
  };

  CLI::App* generate = app.add_subcommand("generate", "Sample training and validation data");
  common(generate);
  CLI::App* train = app.add_subcommand("train", "Fit the control-effect model and the controller");
  common(train);
  train->add_option("--data", o.data, "Directory with train.csv and val.csv");
  CLI::App* simulate = app.add_subcommand("simulate", "Simulate the closed loop from the config's initial states");
  common(simulate);
  with_controller(simulate);
  CLI::App* roa = app.add_subcommand("roa", "Estimate the region of attraction");
  common(roa);
  with_controller(roa);
  CLI::App* iterate = app.add_subcommand("iterate", "Iterative learning from a small safe region");
  common(iterate);
  iterate->add_option("--rounds", o.rounds, "Number of rounds")->check(CLI::PositiveNumber);
  CLI::App* mc = app.add_subcommand("mc-dropout", "Failure-probability map under MC dropout");
  common(mc);
  mc->add_option("--checkpoint", o.checkpoint, "Directory with controller.json (default: --out)");
  CLI::App* portrait = app.add_subcommand("phase-portrait", "SVG phase portrait of a 2-D slice");
  common(portrait);
  with_controller(portrait);
  portrait->add_option("--source", o.source, "hypothesis or closed_loop")
      ->check(CLI::IsMember({"hypothesis", "closed_loop"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: usage: %s\n", e.what());
    return 2;
  }
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    ExperimentConfig cfg = load_experiment_config(o.config);
    if (o.seed && (train->parsed() || generate->parsed() || iterate->parsed())) {
      cfg.train.seed = *o.seed;
    }
    if (generate->parsed()) return cmd_generate(cfg, o);
    if (train->parsed()) return cmd_train(cfg, o);
    if (simulate->parsed()) return cmd_simulate(cfg, o);
    if (roa->parsed()) return cmd_roa(cfg, o);
    if (iterate->parsed()) return cmd_iterate(cfg, o);
    if (mc->parsed()) return cmd_mc_dropout(cfg, o);
    if (portrait->parsed()) return cmd_phase_portrait(cfg, o);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", e.kind().c_str(), e.what());
    return exit_code(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", e.what());
    return 1;
  }
  return 1;
}

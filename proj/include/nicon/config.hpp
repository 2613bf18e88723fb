#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nicon/evaluation.hpp"

namespace nicon {

inline constexpr const char* kExperimentSchema = "nicon.experiment.v1";

struct PlantConfig {
  std::string kind = "pendulum";  // pendulum | cartpole | vehicle
  PendulumParams pendulum = default_pendulum_params(1);
  CartPoleParams cartpole;
  VehicleParams vehicle;
  // Overrides of the plant's default state domain.
  std::optional<Vec> domain_lo;
  std::optional<Vec> domain_hi;
};

struct RoaConfig {
  RoaThresholds thresholds;
  int samples = 200;
  std::uint64_t seed = 7;
  // Initial states are drawn from the state domain scaled by this factor.
  double region_scale = 1.0;
  // 2-D slice grid written next to the ROA samples.
  int slice_x = 0;
  int slice_y = 1;
  int slice_resolution = 21;
};

struct LqrConfig {
  Vec q_diag;  // empty: identity
  Vec r_diag;  // empty: identity
  double h = 0.01;
};

struct IterateConfig {
  int rounds = 2;
  // Round 1 trains on the state domain scaled by this factor.
  double initial_scale = 0.5;
  double shrink = 0.1;
  double policy_fraction = 0.5;
};

struct McDropoutConfig {
  double p_drop = 0.2;
  int runs = 50;
  int resolution = 21;
  int dim_x = 0;
  int dim_y = 1;
  std::uint64_t seed = 11;
};

struct PhasePortraitConfig {
  int dim_x = 0;
  int dim_y = 1;
  int resolution = 9;  // starts per axis
  double horizon = 10.0;
};

struct ExperimentConfig {
  std::string name;
  PlantConfig plant;
  StabilityConfig stability;
  TrainConfig train;
  std::size_t train_samples = 10000;
  std::size_t val_samples = 5000;
  RoaConfig roa;
  LqrConfig lqr;
  IterateConfig iterate;
  McDropoutConfig mc_dropout;
  PhasePortraitConfig phase_portrait;
  std::vector<Vec> initial_states;  // for `simulate`

  PlantSpec make_plant() const;
};

/// Strict parse: unknown keys, wrong types and incoherent values throw
/// ConfigError carrying the field path.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

}  // namespace nicon

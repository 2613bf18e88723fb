#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "nicon/plants.hpp"
#include "nicon/training.hpp"

namespace nicon {

// State feedback u = controller(x).
using Controller = std::function<Vec(const Vec&)>;

struct SimOptions {
  double horizon = 20.0;  // seconds
  double step = 0.01;     // seconds
  // Length of the trailing window over which the Lyapunov energy is
  // averaged; values >= horizon average the whole trajectory.
  double avg_window = 2.0;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<Vec> states;
  std::vector<Vec> inputs;    // input held over [t_k, t_k + h)
  std::vector<double> energy;  // V(x(t_k))
  double lyapunov_running_avg = 0.0;
  bool left_domain = false;

  const Vec& final_state() const { return states.back(); }
};

/// RK4 with zero-order hold on the control. Stops as soon as a
/// non-saturated coordinate leaves the plant's state domain; saturated
/// coordinates are clamped to it instead.
Trajectory simulate_closed_loop(const PlantSpec& plant, const Controller& controller,
                                const Vec& x0, const Mat& lyapunov_q,
                                const SimOptions& options = {});

/// Integrates an autonomous field without domain checks.
Trajectory simulate_field(const VectorField& field, const Vec& x0,
                          const Mat& lyapunov_q, const SimOptions& options);

enum class Verdict { kConverged, kLeftDomain, kEnergyAboveThreshold };

std::string_view verdict_name(Verdict verdict);

struct RoaThresholds {
  SimOptions sim;
  // tau_V = energy_rel * median initial V.
  double energy_rel = 1e-3;
  // Final |x| (over the plant's verdict coordinates) must stay below
  // final_radius_frac * domain radius.
  double final_radius_frac = 0.05;
  // Controller is invalid when fewer than this fraction of samples converge.
  double min_membership_frac = 0.05;
};

struct RoaEstimate {
  std::vector<Vec> initial_states;
  std::vector<Verdict> verdicts;
  std::vector<double> running_avg;
  double energy_threshold = 0.0;
  double final_radius = 0.0;
  int membership = 0;
  int min_membership = 0;
  bool valid = false;

  std::vector<Vec> converged_states() const;
};

/// Simulates from every initial state; runs on NICON_THREADS workers.
RoaEstimate estimate_roa(const PlantSpec& plant, const Controller& controller,
                         const std::vector<Vec>& initial_states,
                         const Mat& lyapunov_q, const RoaThresholds& thresholds);

/// Samples `count` initial states uniformly from `box`.
RoaEstimate estimate_roa(const PlantSpec& plant, const Controller& controller,
                         const Box& box, int count, const Mat& lyapunov_q,
                         const RoaThresholds& thresholds, Rng& rng);

std::vector<Vec> sample_states(const Box& box, int count, Rng& rng);

/// Regular grid over coordinates (dim_x, dim_y) of `box`, all other
/// coordinates zero.
std::vector<Vec> slice_grid(const Box& box, int dim_x, int dim_y, int resolution);

struct Linearization {
  Mat a;
  Mat b;
};

/// Central-difference Jacobians of the plant at the origin.
Linearization linearize(const PlantSpec& plant, double step = 1e-5);

struct LqrGain {
  Mat k;          // m x n, u = -K x
  double h = 0.0;  // discretization step
  Mat p;           // DARE solution
  Mat q;
  Mat r;
  int iterations = 0;
  double residual = 0.0;
};

/// Iterates the discrete Riccati recursion from P = Q until successive
/// iterates differ by less than `tol` (max-abs). Throws BaselineError
/// without convergence in `max_iterations`.
LqrGain solve_dare(const Mat& a_d, const Mat& b_d, const Mat& q, const Mat& r,
                   int max_iterations = 100000, double tol = 1e-10);

/// Euler-discretized LQR on the finite-difference linearization.
LqrGain lqr_gain(const PlantSpec& plant, const Mat& q, const Mat& r, double h_disc);

/// u = clamp(-K x) to the plant's per-component control limit.
Controller lqr_controller(const LqrGain& gain, const PlantSpec& plant);
Controller zero_controller(const PlantSpec& plant);
Controller learned_controller(const ControllerModel& model);

/// For each initial state, the fraction of `n_mc` closed-loop runs that fail
/// the ROA convergence test, each run using one dropout mask of the
/// controller drawn with probability `p_drop`.
std::vector<double> mc_dropout_map(const PlantSpec& plant, const ControllerModel& model,
                                   double p_drop, const std::vector<Vec>& initial_states,
                                   int n_mc, const Mat& lyapunov_q,
                                   const RoaThresholds& thresholds, std::uint64_t seed);

struct IterationConfig {
  int rounds = 2;
  Box initial_domain;
  std::size_t train_samples = 10000;
  std::size_t val_samples = 5000;
  int roa_samples = 200;
  // Round k > 1 trains on the bounding box of round k-1's converged
  // initial states, shrunk by this fraction of its width on every side.
  double shrink = 0.1;
  // Fraction of round k > 1 samples queried with the previous controller's
  // input; the rest use uniformly random inputs.
  double policy_fraction = 0.5;
  std::uint64_t roa_seed = 0;
};

struct RoundResult {
  Box training_domain;
  TrainedModels models;
  RoaEstimate roa;
};

struct IterationResult {
  std::vector<RoundResult> rounds;
  bool halted = false;
  std::string diagnostic;
};

/// Alternates training and ROA estimation, growing the training domain from
/// the converged region of the previous round. The ROA of every round is
/// estimated on the plant's state domain from the same samples.
IterationResult iterative_learning(const PlantSpec& plant, const TrainConfig& train,
                                   const RoaThresholds& thresholds,
                                   const IterationConfig& config);

/// x0..., verdict, V_running_avg
void write_roa(const RoaEstimate& roa, const std::filesystem::path& path);
/// t, x..., u..., V
void write_trajectory(const Trajectory& trajectory, const std::filesystem::path& path);

int worker_count();

}  // namespace nicon

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "nicon/numkit.hpp"

namespace nicon {

// Black-box plant dynamics dx/dt = f(x, u).
using Dynamics = std::function<Vec(const Vec& x, const Vec& u)>;

// Axis-aligned box [lo, hi].
struct Box {
  Vec lo;
  Vec hi;

  int dim() const { return static_cast<int>(lo.size()); }
  bool contains(const Vec& x) const;
  Vec center() const { return 0.5 * (lo + hi); }
  Vec half_width() const { return 0.5 * (hi - lo); }
  // Euclidean norm of the half-width vector.
  double radius() const { return half_width().norm(); }
  // Box with the same center and every half-width multiplied by `factor`.
  Box scaled(double factor) const;
  // Moves each side inwards by `fraction` of that side's width.
  Box shrunk(double fraction) const;
  bool contains(const Box& other) const;
  void validate() const;

  static Box symmetric(const Vec& half_width);
};

struct PlantSpec {
  std::string name;
  int n = 0;
  int m = 0;
  Dynamics deriv;
  Box state_domain;
  // Bound on |u| (Euclidean norm for vector inputs).
  double input_bound = 0.0;
  // Coordinates clamped to the domain during simulation instead of ending it.
  std::vector<int> saturated_dims;
  // Coordinates that must reach the origin for a trajectory to count as
  // converged; empty means all.
  std::vector<int> verdict_dims;
  std::map<std::string, double> params;
  Vec equilibrium;

  // Per-component limit ubar / sqrt(m): the box it spans lies inside the
  // ubar-ball and touches it at the corners.
  Vec control_limit() const;
  bool input_admissible(const Vec& u) const;
  // Uniform over the ubar-ball (m > 1) or the interval [-ubar, ubar].
  Vec sample_input(Rng& rng) const;
  std::vector<int> checked_dims() const;
};

enum class LinkModel { kPointMass, kRod };

struct PendulumParams {
  int links = 1;
  LinkModel link_model = LinkModel::kPointMass;
  std::vector<double> mass;    // per link, default 1 kg
  std::vector<double> length;  // per link, default 1 m
  double gravity = 9.81;
};

PendulumParams default_pendulum_params(int links);

/// Fully actuated n-link pendulum (n = 1..3), point masses at the link ends
/// or uniform rods per `link_model`.
/// State (theta_1..theta_n, omega_1..omega_n), absolute link angles
/// measured from the upright posture; inputs are generalized torques.
PlantSpec pendulum_nlink(const PendulumParams& params);

/// Same dynamics written in hanging-down angles phi_i = theta_i + pi.
Vec pendulum_hanging_deriv(const PendulumParams& params, const Vec& z,
                           const Vec& u);
double pendulum_energy(const PendulumParams& params, const Vec& x);

struct CartPoleParams {
  double cart_mass = 1.0;
  double pole_mass = 0.3;
  double pole_length = 0.5;
  double gravity = 9.81;
};

/// Point-mass pole on a cart. State (x, theta, v, omega), theta from upright.
PlantSpec cartpole(const CartPoleParams& params);
Vec cartpole_hanging_deriv(const CartPoleParams& params, const Vec& z,
                           const Vec& u);

struct VehicleParams {
  double speed = 2.0;
  double wheelbase = 1.0;
};

/// Front-axle crosstrack error (d_e, theta_e) against a straight path,
/// input is the steering angle.
PlantSpec wheeled_vehicle(const VehicleParams& params);
/// Vehicle in world coordinates: pose (p_x, p_y, psi) of the front axle.
Vec vehicle_pose_deriv(const VehicleParams& params, const Vec& pose,
                       const Vec& u);

// Test plants.
PlantSpec linear_decay_plant(int n, double input_bound = 1.0);
PlantSpec input_decoupled_plant(int n);

struct DynamicsSample {
  Vec x;
  Vec u;
  Vec dxdt_u;  // f(x, u)
  Vec dxdt_0;  // f(x, 0)
};

enum class Split { kTrain, kVal };

struct Dataset {
  std::vector<DynamicsSample> samples;
  std::string plant;
  int n = 0;
  int m = 0;
  Box domain;
  double input_bound = 0.0;
  std::uint64_t seed = 0;
  Split split = Split::kTrain;

  std::size_t size() const { return samples.size(); }
};

struct DatasetSplits {
  Dataset train;
  Dataset val;
};

enum class InputSampling { kUniform, kZero };

using InputPolicy = std::function<Vec(const Vec& x, Rng& rng)>;

/// Draws `count` states uniformly from `domain` and queries the plant at
/// (x, policy(x)) and (x, 0).
Dataset generate_dataset_with(const PlantSpec& plant, std::size_t count,
                              Rng& rng, const Box& domain,
                              const InputPolicy& policy);

/// States uniform in the plant's state domain; inputs uniform in the input
/// set, or zero.
Dataset generate_dataset(const PlantSpec& plant, std::size_t count, Rng& rng,
                         InputSampling inputs = InputSampling::kUniform);

/// Train and validation sets on independent streams of `seed`.
DatasetSplits generate_splits(const PlantSpec& plant, std::size_t n_train,
                              std::size_t n_val, std::uint64_t seed,
                              const Box& domain);

/// Throws ConfigError if a sample is out of the domain, exceeds the input
/// bound, has the wrong shape or is non-finite.
void validate_dataset(const Dataset& data, const PlantSpec& plant);

/// Writes the CSV and a `<path>.meta.json` sidecar.
void write_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path, const PlantSpec& plant);

}  // namespace nicon

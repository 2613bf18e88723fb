#include "nicon/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "nicon/errors.hpp"

namespace nicon {
namespace {

// Runs body(i) for i in [0, count) on worker_count() threads. Each index is
// independent, so the result does not depend on the thread count.
template <typename Body>
void parallel_for(std::size_t count, Body&& body) {
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(worker_count()), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 == 1 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

std::vector<int> verdict_dims(const PlantSpec& plant) {
  if (!plant.verdict_dims.empty()) return plant.verdict_dims;
  std::vector<int> dims(static_cast<std::size_t>(plant.n));
  for (int i = 0; i < plant.n; ++i) dims[static_cast<std::size_t>(i)] = i;
  return dims;
}

double norm_over(const Vec& x, const std::vector<int>& dims) {
  double sum = 0.0;
  for (int d : dims) sum += x[d] * x[d];
  return std::sqrt(sum);
}

struct VerdictRule {
  double energy_threshold;
  double final_radius;
  std::vector<int> dims;
};

VerdictRule make_rule(const PlantSpec& plant, const std::vector<Vec>& initial_states,
                      const Mat& q, const RoaThresholds& thresholds) {
  std::vector<double> v0;
  v0.reserve(initial_states.size());
  for (const auto& x : initial_states) v0.push_back(quad_form(q, x));
  VerdictRule rule;
  rule.dims = verdict_dims(plant);
  rule.energy_threshold = thresholds.energy_rel * median(std::move(v0));
  rule.final_radius =
      thresholds.final_radius_frac * norm_over(plant.state_domain.half_width(), rule.dims);
  return rule;
}

Verdict classify(const Trajectory& traj, const VerdictRule& rule) {
  if (traj.left_domain) return Verdict::kLeftDomain;
  if (traj.lyapunov_running_avg > rule.energy_threshold ||
      norm_over(traj.final_state(), rule.dims) >= rule.final_radius) {
    return Verdict::kEnergyAboveThreshold;
  }
  return Verdict::kConverged;
}

int step_count(const SimOptions& options) {
  if (!(options.horizon > 0.0) || !(options.step > 0.0)) {
    throw ConfigError("simulation horizon and step must be positive");
  }
  return static_cast<int>(std::llround(options.horizon / options.step));
}

void finish_average(Trajectory& traj, const SimOptions& options) {
  const double t_end = traj.times.back();
  const double start = std::max(0.0, options.horizon - options.avg_window);
  double sum = 0.0;
  int count = 0;
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    if (traj.times[k] >= start - 1e-9 || traj.times[k] >= t_end) {
      sum += traj.energy[k];
      ++count;
    }
  }
  traj.lyapunov_running_avg = count > 0 ? sum / count : traj.energy.back();
}

std::string csv_row(const std::vector<double>& values) {
  std::string line;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i > 0) line += ',';
    line += fmt::format("{:.17g}", values[i]);
  }
  return line;
}

}  // namespace

int worker_count() {
  if (const char* env = std::getenv("NICON_THREADS")) {
    const int value = std::atoi(env);
    if (value > 0) return value;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

std::string_view verdict_name(Verdict verdict) {
  switch (verdict) {
    case Verdict::kConverged:
      return "converged";
    case Verdict::kLeftDomain:
      return "left_domain";
    case Verdict::kEnergyAboveThreshold:
      return "energy_above_threshold";
  }
  return "unknown";
}

Trajectory simulate_closed_loop(const PlantSpec& plant, const Controller& controller,
                                const Vec& x0, const Mat& lyapunov_q,
                                const SimOptions& options) {
  if (x0.size() != plant.n) throw ConfigError("initial state dimension mismatch");
  const int steps = step_count(options);
  const std::vector<int> checked = plant.checked_dims();
  const Box& domain = plant.state_domain;

  Trajectory traj;
  traj.times.reserve(static_cast<std::size_t>(steps) + 1);
  traj.states.reserve(static_cast<std::size_t>(steps) + 1);
  traj.inputs.reserve(static_cast<std::size_t>(steps) + 1);
  traj.energy.reserve(static_cast<std::size_t>(steps) + 1);

  auto outside = [&](const Vec& x) {
    for (int d : checked) {
      if (x[d] < domain.lo[d] || x[d] > domain.hi[d]) return true;
    }
    return false;
  };
  auto control_at = [&](const Vec& x) {
    Vec u = controller(x);
    if (u.size() != plant.m || !all_finite(u)) {
      throw SimulationError("controller returned an invalid input", to_string(x));
    }
    return u;
  };

  Vec x = x0;
  traj.left_domain = outside(x);
  for (int k = 0; k <= steps; ++k) {
    const Vec u = control_at(x);
    traj.times.push_back(k * options.step);
    traj.states.push_back(x);
    traj.inputs.push_back(u);
    traj.energy.push_back(quad_form(lyapunov_q, x));
    if (k == steps || traj.left_domain) break;
    x = rk4_step([&](const Vec& s) { return plant.deriv(s, u); }, x, options.step);
    if (!all_finite(x)) throw SimulationError("non-finite state", to_string(x));
    for (int d : plant.saturated_dims) {
      x[d] = std::clamp(x[d], domain.lo[d], domain.hi[d]);
    }
    traj.left_domain = outside(x);
  }
  finish_average(traj, options);
  return traj;
}

Trajectory simulate_field(const VectorField& field, const Vec& x0,
                          const Mat& lyapunov_q, const SimOptions& options) {
  const int steps = step_count(options);
  Trajectory traj;
  Vec x = x0;
  for (int k = 0; k <= steps; ++k) {
    traj.times.push_back(k * options.step);
    traj.states.push_back(x);
    traj.energy.push_back(quad_form(lyapunov_q, x));
    if (k == steps) break;
    x = rk4_step(field, x, options.step);
  }
  finish_average(traj, options);
  return traj;
}

std::vector<Vec> RoaEstimate::converged_states() const {
  std::vector<Vec> out;
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    if (verdicts[i] == Verdict::kConverged) out.push_back(initial_states[i]);
  }
  return out;
}

RoaEstimate estimate_roa(const PlantSpec& plant, const Controller& controller,
                         const std::vector<Vec>& initial_states,
                         const Mat& lyapunov_q, const RoaThresholds& thresholds) {
  RoaEstimate roa;
  roa.initial_states = initial_states;
  const VerdictRule rule = make_rule(plant, initial_states, lyapunov_q, thresholds);
  roa.energy_threshold = rule.energy_threshold;
  roa.final_radius = rule.final_radius;
  roa.verdicts.assign(initial_states.size(), Verdict::kLeftDomain);
  roa.running_avg.assign(initial_states.size(), 0.0);
  parallel_for(initial_states.size(), [&](std::size_t i) {
    const Trajectory traj = simulate_closed_loop(plant, controller, initial_states[i],
                                                 lyapunov_q, thresholds.sim);
    roa.verdicts[i] = classify(traj, rule);
    roa.running_avg[i] = traj.lyapunov_running_avg;
  });
  roa.membership = static_cast<int>(
      std::count(roa.verdicts.begin(), roa.verdicts.end(), Verdict::kConverged));
  roa.min_membership = static_cast<int>(
      std::ceil(thresholds.min_membership_frac * static_cast<double>(initial_states.size())));
  roa.valid = roa.membership >= roa.min_membership && roa.membership > 0;
  return roa;
}

std::vector<Vec> sample_states(const Box& box, int count, Rng& rng) {
  std::vector<Vec> states;
  states.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) states.push_back(sample_uniform_box(rng, box.lo, box.hi));
  return states;
}

RoaEstimate estimate_roa(const PlantSpec& plant, const Controller& controller,
                         const Box& box, int count, const Mat& lyapunov_q,
                         const RoaThresholds& thresholds, Rng& rng) {
  return estimate_roa(plant, controller, sample_states(box, count, rng), lyapunov_q,
                      thresholds);
}

std::vector<Vec> slice_grid(const Box& box, int dim_x, int dim_y, int resolution) {
  if (resolution < 2) throw ConfigError("grid resolution must be >= 2");
  if (dim_x < 0 || dim_y < 0 || dim_x >= box.dim() || dim_y >= box.dim() ||
      dim_x == dim_y) {
    throw ConfigError("invalid slice coordinates");
  }
  std::vector<Vec> grid;
  for (int j = 0; j < resolution; ++j) {
    for (int i = 0; i < resolution; ++i) {
      Vec x = Vec::Zero(box.dim());
      x[dim_x] = box.lo[dim_x] + (box.hi[dim_x] - box.lo[dim_x]) * i / (resolution - 1);
      x[dim_y] = box.lo[dim_y] + (box.hi[dim_y] - box.lo[dim_y]) * j / (resolution - 1);
      grid.push_back(std::move(x));
    }
  }
  return grid;
}

Linearization linearize(const PlantSpec& plant, double step) {
  Linearization lin{Mat(plant.n, plant.n), Mat(plant.n, plant.m)};
  const Vec x0 = Vec::Zero(plant.n);
  const Vec u0 = Vec::Zero(plant.m);
  for (int j = 0; j < plant.n; ++j) {
    Vec dx = Vec::Zero(plant.n);
    dx[j] = step;
    lin.a.col(j) = (plant.deriv(x0 + dx, u0) - plant.deriv(x0 - dx, u0)) / (2.0 * step);
  }
  for (int j = 0; j < plant.m; ++j) {
    Vec du = Vec::Zero(plant.m);
    du[j] = step;
    lin.b.col(j) = (plant.deriv(x0, u0 + du) - plant.deriv(x0, u0 - du)) / (2.0 * step);
  }
  return lin;
}

LqrGain solve_dare(const Mat& a_d, const Mat& b_d, const Mat& q, const Mat& r,
                   int max_iterations, double tol) {
  const Eigen::Index n = a_d.rows();
  if (a_d.cols() != n || b_d.rows() != n || q.rows() != n || q.cols() != n ||
      r.rows() != b_d.cols() || r.cols() != b_d.cols()) {
    throw ConfigError("DARE dimension mismatch");
  }
  LqrGain gain;
  gain.q = q;
  gain.r = r;
  Mat p = q;
  for (int it = 1; it <= max_iterations; ++it) {
    const Mat bt_p = b_d.transpose() * p;
    const Mat s = r + bt_p * b_d;
    const Mat k = s.ldlt().solve(bt_p * a_d);
    Mat next = q + a_d.transpose() * p * a_d - (bt_p * a_d).transpose() * k;
    next = 0.5 * (next + next.transpose());
    const double residual = (next - p).cwiseAbs().maxCoeff();
    p = std::move(next);
    if (!std::isfinite(residual)) break;
    if (residual < tol) {
      gain.p = p;
      const Mat bt_p_final = b_d.transpose() * p;
      gain.k = (r + bt_p_final * b_d).ldlt().solve(bt_p_final * a_d);
      gain.iterations = it;
      gain.residual = residual;
      return gain;
    }
  }
  throw BaselineError(
      fmt::format("Riccati iteration did not converge in {} iterations", max_iterations));
}

LqrGain lqr_gain(const PlantSpec& plant, const Mat& q, const Mat& r, double h_disc) {
  if (!(h_disc > 0.0)) throw ConfigError("LQR discretization step must be positive");
  const Linearization lin = linearize(plant);
  const Mat a_d = Mat::Identity(plant.n, plant.n) + h_disc * lin.a;
  const Mat b_d = h_disc * lin.b;
  LqrGain gain = solve_dare(a_d, b_d, q, r);
  gain.h = h_disc;
  return gain;
}

Controller lqr_controller(const LqrGain& gain, const PlantSpec& plant) {
  const Vec limit = plant.control_limit();
  const Mat k = gain.k;
  return [k, limit](const Vec& x) {
    Vec u = -(k * x);
    return Vec(u.cwiseMax(-limit).cwiseMin(limit));
  };
}

Controller zero_controller(const PlantSpec& plant) {
  const int m = plant.m;
  return [m](const Vec&) { return Vec(Vec::Zero(m)); };
}

Controller learned_controller(const ControllerModel& model) {
  return [model](const Vec& x) { return model.control(x); };
}

std::vector<double> mc_dropout_map(const PlantSpec& plant, const ControllerModel& model,
                                   double p_drop, const std::vector<Vec>& initial_states,
                                   int n_mc, const Mat& lyapunov_q,
                                   const RoaThresholds& thresholds, std::uint64_t seed) {
  if (n_mc < 1) throw ConfigError("MC run count must be positive");
  const VerdictRule rule = make_rule(plant, initial_states, lyapunov_q, thresholds);
  const DropoutSpec spec{p_drop, DropoutMode::kMcInference};
  const Rng base(seed, 40);
  std::vector<int> failures(initial_states.size(), 0);
  const std::size_t total = initial_states.size() * static_cast<std::size_t>(n_mc);
  std::vector<char> failed(total, 0);
  parallel_for(total, [&](std::size_t job) {
    const std::size_t i = job / static_cast<std::size_t>(n_mc);
    Rng rng = base.child(job);
    const DropoutMask mask = draw_dropout_mask(model.pi, spec, 1, rng);
    const Controller controller = [&model, &mask](const Vec& x) {
      return mask.empty() ? model.control(x) : model.control(x, mask);
    };
    const Trajectory traj =
        simulate_closed_loop(plant, controller, initial_states[i], lyapunov_q, thresholds.sim);
    failed[job] = classify(traj, rule) != Verdict::kConverged;
  });
  std::vector<double> probability(initial_states.size());
  for (std::size_t i = 0; i < initial_states.size(); ++i) {
    int count = 0;
    for (int j = 0; j < n_mc; ++j) count += failed[i * static_cast<std::size_t>(n_mc) + j];
    probability[i] = static_cast<double>(count) / n_mc;
  }
  return probability;
}

IterationResult iterative_learning(const PlantSpec& plant, const TrainConfig& train,
                                   const RoaThresholds& thresholds,
                                   const IterationConfig& config) {
  if (config.rounds < 1) throw ConfigError("rounds must be >= 1", "iterate.rounds");
  config.initial_domain.validate();
  Rng roa_rng(config.roa_seed, 50);
  const std::vector<Vec> roa_states =
      sample_states(plant.state_domain, config.roa_samples, roa_rng);

  IterationResult result;
  Box domain = config.initial_domain;
  for (int round = 0; round < config.rounds; ++round) {
    TrainConfig cfg = train;
    cfg.seed = train.seed + 1000ULL * static_cast<std::uint64_t>(round);
    DatasetSplits data;
    if (round == 0) {
      data = generate_splits(plant, config.train_samples, config.val_samples, cfg.seed,
                             domain);
    } else {
      const ControllerModel previous = result.rounds.back().models.controller;
      const double fraction = config.policy_fraction;
      const InputPolicy policy = [&plant, previous, fraction](const Vec& x, Rng& rng) {
        return rng.uniform() < fraction ? previous.control(x) : plant.sample_input(rng);
      };
      Rng train_rng(cfg.seed, 1);
      Rng val_rng(cfg.seed, 2);
      data.train = generate_dataset_with(plant, config.train_samples, train_rng, domain, policy);
      data.val = generate_dataset_with(plant, config.val_samples, val_rng, domain, policy);
      data.val.split = Split::kVal;
    }
    spdlog::info("iteration round {}: training on [{}] x [{}]", round + 1,
                 to_string(domain.lo), to_string(domain.hi));
    RoundResult rr;
    rr.training_domain = domain;
    rr.models = train_all(data, cfg);
    rr.roa = estimate_roa(plant, learned_controller(rr.models.controller), roa_states,
                          train.stability.q, thresholds);
    spdlog::info("iteration round {}: ROA membership {}/{}", round + 1,
                 rr.roa.membership, rr.roa.initial_states.size());
    const bool valid = rr.roa.valid;
    result.rounds.push_back(std::move(rr));
    if (!valid) {
      result.halted = true;
      result.diagnostic = fmt::format(
          "round {} controller is invalid: {} converged, {} required", round + 1,
          result.rounds.back().roa.membership, result.rounds.back().roa.min_membership);
      break;
    }
    if (round + 1 < config.rounds) {
      const std::vector<Vec> converged = result.rounds.back().roa.converged_states();
      Box hull{converged.front(), converged.front()};
      for (const auto& x : converged) {
        hull.lo = hull.lo.cwiseMin(x);
        hull.hi = hull.hi.cwiseMax(x);
      }
      domain = hull.shrunk(config.shrink);
    }
  }
  return result;
}

void write_roa(const RoaEstimate& roa, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingFileError(path.string());
  const Eigen::Index n = roa.initial_states.empty() ? 0 : roa.initial_states.front().size();
  std::string header;
  for (Eigen::Index i = 0; i < n; ++i) header += fmt::format("x{},", i);
  out << header << "verdict,V_running_avg\n";
  for (std::size_t k = 0; k < roa.initial_states.size(); ++k) {
    const Vec& x = roa.initial_states[k];
    out << csv_row(std::vector<double>(x.data(), x.data() + x.size())) << ','
        << verdict_name(roa.verdicts[k]) << ',' << fmt::format("{:.17g}", roa.running_avg[k])
        << '\n';
  }
}

void write_trajectory(const Trajectory& trajectory, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingFileError(path.string());
  const Eigen::Index n = trajectory.states.front().size();
  const Eigen::Index m = trajectory.inputs.empty() ? 0 : trajectory.inputs.front().size();
  std::string header = "t";
  for (Eigen::Index i = 0; i < n; ++i) header += fmt::format(",x{}", i);
  for (Eigen::Index i = 0; i < m; ++i) header += fmt::format(",u{}", i);
  out << header << ",V\n";
  for (std::size_t k = 0; k < trajectory.states.size(); ++k) {
    std::vector<double> row{trajectory.times[k]};
    const Vec& x = trajectory.states[k];
    row.insert(row.end(), x.data(), x.data() + x.size());
    if (k < trajectory.inputs.size()) {
      const Vec& u = trajectory.inputs[k];
      row.insert(row.end(), u.data(), u.data() + u.size());
    }
    row.push_back(trajectory.energy[k]);
    out << csv_row(row) << '\n';
  }
}

}  // namespace nicon

#include "nicon/plants.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "nicon/errors.hpp"

namespace nicon {
namespace {

using nlohmann::json;

// Link k's centre of mass sits at sum_{i<k} l_i e(theta_i) + r_k e(theta_k),
// with r_k = l_k (point mass at the tip) or l_k / 2 (uniform rod). Then
// a_ij = sum_{k >= max(i, j)} m_k c_ki c_kj with c_ki = l_i (i < k) or r_k
// (i = k), the gravity moment is h_i = sum_{k >= i} m_k c_ki, and rods add
// their own inertia m_k l_k^2 / 12 on the diagonal.
struct LinkTerms {
  Mat a;
  Vec moment;
  Vec inertia;
};

LinkTerms link_terms(const PendulumParams& p) {
  const int n = p.links;
  const bool rod = p.link_model == LinkModel::kRod;
  LinkTerms t{Mat::Zero(n, n), Vec::Zero(n), Vec::Zero(n)};
  auto lever = [&](int k, int i) {
    if (i < k) return p.length[i];
    return rod ? 0.5 * p.length[i] : p.length[i];
  };
  for (int k = 0; k < n; ++k) {
    for (int i = 0; i <= k; ++i) {
      t.moment[i] += p.mass[k] * lever(k, i);
      for (int j = 0; j <= k; ++j) t.a(i, j) += p.mass[k] * lever(k, i) * lever(k, j);
    }
    if (rod) t.inertia[k] = p.mass[k] * p.length[k] * p.length[k] / 12.0;
  }
  return t;
}

// Manipulator equations M(q) qdd + c(q, qd) + G(q) = tau, with the gravity
// sign chosen by `gravity_sign` (+1 hanging-down angles, -1 upright angles).
Vec pendulum_rhs(const PendulumParams& p, const LinkTerms& t, const Vec& z,
                 const Vec& u, double gravity_sign) {
  const int n = p.links;
  const auto theta = z.head(n);
  const auto omega = z.tail(n);
  Mat mass(n, n);
  Vec rhs(n);
  for (int i = 0; i < n; ++i) {
    double coriolis = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = theta[i] - theta[j];
      mass(i, j) = t.a(i, j) * std::cos(d) + (i == j ? t.inertia[i] : 0.0);
      coriolis += t.a(i, j) * std::sin(d) * omega[j] * omega[j];
    }
    const double grav =
        gravity_sign * p.gravity * std::sin(theta[i]) * t.moment[i];
    rhs[i] = u[i] - coriolis - grav;
  }
  Eigen::LLT<Mat> llt(mass);
  if (llt.info() != Eigen::Success) {
    throw PlantError("pendulum mass matrix is singular");
  }
  Vec dz(2 * n);
  dz.head(n) = omega;
  dz.tail(n) = llt.solve(rhs);
  return dz;
}

void check_pendulum_params(const PendulumParams& p) {
  if (p.links < 1 || p.links > 3) throw ConfigError("pendulum supports 1, 2 or 3 links");
  if (static_cast<int>(p.mass.size()) != p.links ||
      static_cast<int>(p.length.size()) != p.links) {
    throw ConfigError("pendulum mass/length lists must have one entry per link");
  }
  for (int i = 0; i < p.links; ++i) {
    if (!(p.mass[i] > 0.0) || !(p.length[i] > 0.0)) {
      throw ConfigError("pendulum masses and lengths must be positive");
    }
  }
  if (!(p.gravity > 0.0)) throw ConfigError("gravity must be positive");
}

void check_shape(const Vec& x, const Vec& u, int n, int m, const char* plant) {
  if (x.size() != n || u.size() != m) {
    throw ConfigError(fmt::format("{}: expected state {} / input {}, got {} / {}",
                                  plant, n, m, x.size(), u.size()));
  }
}

Vec cartpole_accel(const CartPoleParams& p, double sin_t, double cos_t,
                   double omega, double force) {
  const double mc = p.cart_mass;
  const double mp = p.pole_mass;
  const double l = p.pole_length;
  const double xdd = (force + mp * sin_t * (l * omega * omega - p.gravity * cos_t)) /
                     (mc + mp * sin_t * sin_t);
  const double tdd = (p.gravity * sin_t - cos_t * xdd) / l;
  return Eigen::Vector2d(xdd, tdd);
}

std::string fmt_double(double v) { return fmt::format("{:.17g}", v); }

json box_to_json(const Box& box) {
  return json{{"lo", std::vector<double>(box.lo.data(), box.lo.data() + box.lo.size())},
              {"hi", std::vector<double>(box.hi.data(), box.hi.data() + box.hi.size())}};
}

Vec json_to_vec(const json& node) {
  const auto values = node.get<std::vector<double>>();
  return Eigen::Map<const Vec>(values.data(), static_cast<Eigen::Index>(values.size()));
}

}  // namespace

bool Box::contains(const Vec& x) const {
  if (x.size() != lo.size()) return false;
  return (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
}

bool Box::contains(const Box& other) const {
  return other.dim() == dim() && (other.lo.array() >= lo.array()).all() &&
         (other.hi.array() <= hi.array()).all();
}

Box Box::scaled(double factor) const {
  const Vec c = center();
  const Vec h = half_width() * factor;
  return Box{c - h, c + h};
}

Box Box::shrunk(double fraction) const {
  const Vec w = hi - lo;
  return Box{lo + fraction * w, hi - fraction * w};
}

void Box::validate() const {
  if (lo.size() != hi.size() || lo.size() == 0) {
    throw ConfigError("box bounds must be non-empty and of equal length");
  }
  if (!lo.allFinite() || !hi.allFinite() || (lo.array() > hi.array()).any()) {
    throw ConfigError("box requires finite bounds with lo <= hi");
  }
}

Box Box::symmetric(const Vec& half_width) { return Box{-half_width, half_width}; }

Vec PlantSpec::control_limit() const {
  return Vec::Constant(m, input_bound / std::sqrt(static_cast<double>(m)));
}

bool PlantSpec::input_admissible(const Vec& u) const {
  return u.size() == m && u.allFinite() && u.norm() <= input_bound * (1.0 + 1e-12);
}

Vec PlantSpec::sample_input(Rng& rng) const {
  if (m == 1) return Vec::Constant(1, rng.uniform(-input_bound, input_bound));
  const Vec lo = Vec::Constant(m, -input_bound);
  const Vec hi = Vec::Constant(m, input_bound);
  for (;;) {
    Vec u = sample_uniform_box(rng, lo, hi);
    if (u.norm() <= input_bound) return u;
  }
}

std::vector<int> PlantSpec::checked_dims() const {
  std::vector<int> dims;
  for (int i = 0; i < n; ++i) {
    bool saturated = false;
    for (int s : saturated_dims) saturated = saturated || s == i;
    if (!saturated) dims.push_back(i);
  }
  return dims;
}

PendulumParams default_pendulum_params(int links) {
  PendulumParams p;
  p.links = links;
  p.mass.assign(static_cast<std::size_t>(std::max(links, 0)), 1.0);
  p.length.assign(static_cast<std::size_t>(std::max(links, 0)), 1.0);
  return p;
}

PlantSpec pendulum_nlink(const PendulumParams& params) {
  check_pendulum_params(params);
  const int n = params.links;
  PlantSpec plant;
  plant.name = fmt::format("pendulum{}", n);
  plant.n = 2 * n;
  plant.m = n;
  const LinkTerms terms = link_terms(params);
  plant.deriv = [params, terms](const Vec& x, const Vec& u) {
    check_shape(x, u, 2 * params.links, params.links, "pendulum");
    return pendulum_rhs(params, terms, x, u, -1.0);
  };
  plant.state_domain = Box::symmetric(Vec::Ones(2 * n));
  plant.input_bound = 10.0 * std::sqrt(static_cast<double>(n));
  plant.equilibrium = Vec::Zero(2 * n);
  plant.params["gravity"] = params.gravity;
  plant.params["rod_links"] = params.link_model == LinkModel::kRod ? 1.0 : 0.0;
  for (int i = 0; i < n; ++i) {
    plant.params[fmt::format("mass{}", i)] = params.mass[i];
    plant.params[fmt::format("length{}", i)] = params.length[i];
  }
  return plant;
}

Vec pendulum_hanging_deriv(const PendulumParams& params, const Vec& z,
                           const Vec& u) {
  check_pendulum_params(params);
  check_shape(z, u, 2 * params.links, params.links, "pendulum");
  return pendulum_rhs(params, link_terms(params), z, u, 1.0);
}

double pendulum_energy(const PendulumParams& params, const Vec& x) {
  const int n = params.links;
  const LinkTerms t = link_terms(params);
  const auto theta = x.head(n);
  const auto omega = x.tail(n);
  double kinetic = 0.0;
  double potential = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      kinetic += 0.5 * t.a(i, j) * std::cos(theta[i] - theta[j]) * omega[i] * omega[j];
    }
    kinetic += 0.5 * t.inertia[i] * omega[i] * omega[i];
    potential += params.gravity * std::cos(theta[i]) * t.moment[i];
  }
  return kinetic + potential;
}

PlantSpec cartpole(const CartPoleParams& params) {
  if (!(params.cart_mass > 0.0 && params.pole_mass > 0.0 &&
        params.pole_length > 0.0 && params.gravity > 0.0)) {
    throw ConfigError("cart-pole parameters must be positive");
  }
  PlantSpec plant;
  plant.name = "cartpole";
  plant.n = 4;
  plant.m = 1;
  plant.deriv = [params](const Vec& x, const Vec& u) {
    check_shape(x, u, 4, 1, "cartpole");
    const Vec acc =
        cartpole_accel(params, std::sin(x[1]), std::cos(x[1]), x[3], u[0]);
    Vec dx(4);
    dx << x[2], x[3], acc[0], acc[1];
    return dx;
  };
  plant.state_domain = Box{Eigen::Vector4d(-2.0, -0.8, -2.0, -2.0),
                           Eigen::Vector4d(2.0, 0.8, 2.0, 2.0)};
  plant.input_bound = 50.0;
  plant.saturated_dims = {0, 2};
  plant.verdict_dims = {1, 3};
  plant.equilibrium = Vec::Zero(4);
  plant.params = {{"cart_mass", params.cart_mass},
                  {"pole_mass", params.pole_mass},
                  {"pole_length", params.pole_length},
                  {"gravity", params.gravity}};
  return plant;
}

Vec cartpole_hanging_deriv(const CartPoleParams& params, const Vec& z,
                           const Vec& u) {
  check_shape(z, u, 4, 1, "cartpole");
  // sin(phi - pi) = -sin(phi), cos(phi - pi) = -cos(phi).
  const Vec acc =
      cartpole_accel(params, -std::sin(z[1]), -std::cos(z[1]), z[3], u[0]);
  Vec dz(4);
  dz << z[2], z[3], acc[0], acc[1];
  return dz;
}

PlantSpec wheeled_vehicle(const VehicleParams& params) {
  if (!(params.speed > 0.0 && params.wheelbase > 0.0)) {
    throw ConfigError("vehicle speed and wheelbase must be positive");
  }
  PlantSpec plant;
  plant.name = "vehicle";
  plant.n = 2;
  plant.m = 1;
  plant.deriv = [params](const Vec& x, const Vec& u) {
    check_shape(x, u, 2, 1, "vehicle");
    Vec dx(2);
    dx << params.speed * std::sin(x[1] + u[0]),
        params.speed / params.wheelbase * std::sin(u[0]);
    return dx;
  };
  plant.state_domain = Box{Eigen::Vector2d(-2.0, -1.0), Eigen::Vector2d(2.0, 1.0)};
  plant.input_bound = std::numbers::pi / 6.0;
  plant.equilibrium = Vec::Zero(2);
  plant.params = {{"speed", params.speed}, {"wheelbase", params.wheelbase}};
  return plant;
}

Vec vehicle_pose_deriv(const VehicleParams& params, const Vec& pose,
                       const Vec& u) {
  check_shape(pose, u, 3, 1, "vehicle");
  Vec dpose(3);
  dpose << params.speed * std::cos(pose[2] + u[0]),
      params.speed * std::sin(pose[2] + u[0]),
      params.speed / params.wheelbase * std::sin(u[0]);
  return dpose;
}

PlantSpec linear_decay_plant(int n, double input_bound) {
  PlantSpec plant;
  plant.name = "linear_decay";
  plant.n = n;
  plant.m = n;
  plant.deriv = [n](const Vec& x, const Vec& u) {
    check_shape(x, u, n, n, "linear_decay");
    return Vec(-x + u);
  };
  plant.state_domain = Box::symmetric(Vec::Constant(n, 2.0));
  plant.input_bound = input_bound;
  plant.equilibrium = Vec::Zero(n);
  return plant;
}

PlantSpec input_decoupled_plant(int n) {
  PlantSpec plant;
  plant.name = "input_decoupled";
  plant.n = n;
  plant.m = 1;
  plant.deriv = [n](const Vec& x, const Vec& u) {
    check_shape(x, u, n, 1, "input_decoupled");
    Vec dx = x;
    for (int i = 0; i < n; ++i) dx[i] = std::sin(x[(i + 1) % n]) - 0.5 * x[i];
    return dx;
  };
  plant.state_domain = Box::symmetric(Vec::Ones(n));
  plant.input_bound = 1.0;
  plant.equilibrium = Vec::Zero(n);
  return plant;
}

Dataset generate_dataset_with(const PlantSpec& plant, std::size_t count,
                              Rng& rng, const Box& domain,
                              const InputPolicy& policy) {
  if (count == 0) throw ConfigError("dataset size must be positive");
  domain.validate();
  if (domain.dim() != plant.n) throw ConfigError("domain dimension mismatch");
  Dataset data;
  data.plant = plant.name;
  data.n = plant.n;
  data.m = plant.m;
  data.domain = domain;
  data.input_bound = plant.input_bound;
  data.seed = rng.seed();
  data.samples.reserve(count);
  const Vec zero = Vec::Zero(plant.m);
  for (std::size_t i = 0; i < count; ++i) {
    DynamicsSample s;
    s.x = sample_uniform_box(rng, domain.lo, domain.hi);
    s.u = policy(s.x, rng);
    s.dxdt_u = plant.deriv(s.x, s.u);
    s.dxdt_0 = plant.deriv(s.x, zero);
    data.samples.push_back(std::move(s));
  }
  return data;
}

Dataset generate_dataset(const PlantSpec& plant, std::size_t count, Rng& rng,
                         InputSampling inputs) {
  const InputPolicy policy = [&plant, inputs](const Vec&, Rng& r) {
    return inputs == InputSampling::kZero ? Vec(Vec::Zero(plant.m))
                                          : plant.sample_input(r);
  };
  return generate_dataset_with(plant, count, rng, plant.state_domain, policy);
}

DatasetSplits generate_splits(const PlantSpec& plant, std::size_t n_train,
                              std::size_t n_val, std::uint64_t seed,
                              const Box& domain) {
  const InputPolicy policy = [&plant](const Vec&, Rng& r) {
    return plant.sample_input(r);
  };
  Rng train_rng(seed, 1);
  Rng val_rng(seed, 2);
  DatasetSplits splits{
      generate_dataset_with(plant, n_train, train_rng, domain, policy),
      generate_dataset_with(plant, n_val, val_rng, domain, policy)};
  splits.val.split = Split::kVal;
  return splits;
}

void validate_dataset(const Dataset& data, const PlantSpec& plant) {
  if (data.n != plant.n || data.m != plant.m) {
    throw ConfigError("dataset dimensions do not match the plant");
  }
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    const std::string where = fmt::format("sample {}", i);
    if (s.x.size() != plant.n || s.u.size() != plant.m ||
        s.dxdt_u.size() != plant.n || s.dxdt_0.size() != plant.n) {
      throw ConfigError(where + ": wrong shape");
    }
    if (!all_finite(s.x) || !all_finite(s.u) || !all_finite(s.dxdt_u) ||
        !all_finite(s.dxdt_0)) {
      throw ConfigError(where + ": non-finite value");
    }
    if (!data.domain.contains(s.x)) throw ConfigError(where + ": state outside domain");
    if (!plant.input_admissible(s.u)) {
      throw ConfigError(where + ": input exceeds bound");
    }
  }
}

void write_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingFileError(path.string());
  std::string header;
  auto add_cols = [&](const char* prefix, int count) {
    for (int i = 0; i < count; ++i) {
      if (!header.empty()) header += ',';
      header += fmt::format("{}{}", prefix, i);
    }
  };
  add_cols("x", data.n);
  add_cols("u", data.m);
  add_cols("fu", data.n);
  add_cols("f0", data.n);
  out << header << '\n';
  for (const auto& s : data.samples) {
    std::string line;
    for (const Vec* v : {&s.x, &s.u, &s.dxdt_u, &s.dxdt_0}) {
      for (Eigen::Index i = 0; i < v->size(); ++i) {
        if (!line.empty()) line += ',';
        line += fmt_double((*v)[i]);
      }
    }
    out << line << '\n';
  }

  json meta{{"plant", data.plant},
            {"seed", data.seed},
            {"split", data.split == Split::kTrain ? "train" : "val"},
            {"n", data.n},
            {"m", data.m},
            {"count", data.samples.size()},
            {"input_bound", data.input_bound},
            {"domain", box_to_json(data.domain)}};
  std::ofstream meta_out(path.string() + ".meta.json", std::ios::binary);
  if (!meta_out) throw MissingFileError(path.string() + ".meta.json");
  meta_out << meta.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& path, const PlantSpec& plant) {
  std::ifstream meta_in(path.string() + ".meta.json");
  if (!meta_in) throw MissingFileError(path.string() + ".meta.json");
  std::ifstream in(path);
  if (!in) throw MissingFileError(path.string());

  Dataset data;
  try {
    const json meta = json::parse(meta_in);
    data.plant = meta.at("plant").get<std::string>();
    data.seed = meta.at("seed").get<std::uint64_t>();
    data.split = meta.at("split").get<std::string>() == "val" ? Split::kVal
                                                              : Split::kTrain;
    data.n = meta.at("n").get<int>();
    data.m = meta.at("m").get<int>();
    data.input_bound = meta.at("input_bound").get<double>();
    data.domain = Box{json_to_vec(meta.at("domain").at("lo")),
                      json_to_vec(meta.at("domain").at("hi"))};
  } catch (const json::exception& e) {
    throw LoadError(fmt::format("{}.meta.json: {}", path.string(), e.what()));
  }
  if (data.plant != plant.name) {
    throw ConfigError(fmt::format("dataset was generated for '{}', not '{}'",
                                  data.plant, plant.name));
  }

  const int width = 3 * data.n + data.m;
  std::string line;
  std::getline(in, line);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> values;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0') {
        throw LoadError(fmt::format("{}:{}: bad number '{}'", path.string(),
                                    line_no, cell));
      }
      values.push_back(v);
    }
    if (static_cast<int>(values.size()) != width) {
      throw LoadError(fmt::format("{}:{}: expected {} columns, found {}",
                                  path.string(), line_no, width, values.size()));
    }
    const Eigen::Map<const Vec> row(values.data(), width);
    DynamicsSample s{row.segment(0, data.n), row.segment(data.n, data.m),
                     row.segment(data.n + data.m, data.n),
                     row.segment(2 * data.n + data.m, data.n)};
    data.samples.push_back(std::move(s));
  }
  validate_dataset(data, plant);
  return data;
}

}  // namespace nicon

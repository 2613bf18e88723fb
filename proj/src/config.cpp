#include "nicon/config.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "nicon/errors.hpp"

namespace nicon {
namespace {

using nlohmann::json;

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

double as_number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError("expected a number", path);
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw ConfigError("expected a finite number", path);
  return v;
}

long long as_integer(const json& j, const std::string& path) {
  if (!j.is_number_integer()) throw ConfigError("expected an integer", path);
  return j.get<long long>();
}

Vec as_vec(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError("expected an array of numbers", path);
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    v[static_cast<Eigen::Index>(i)] = as_number(j[i], fmt::format("{}[{}]", path, i));
  }
  return v;
}

// Object reader that remembers which keys were consumed so leftovers can be
// reported as unknown.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("expected an object", path_.empty() ? "<root>" : path_);
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  const json& require(const std::string& key) {
    const json* v = find(key);
    if (v == nullptr) throw ConfigError("missing required key", at(key));
    return *v;
  }
  std::string at(const std::string& key) const { return join(path_, key); }

  double number(const std::string& key, double fallback) {
    const json* v = find(key);
    return v == nullptr ? fallback : as_number(*v, at(key));
  }
  int integer(const std::string& key, int fallback) {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    const long long x = as_integer(*v, at(key));
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
      throw ConfigError("integer out of range", at(key));
    }
    return static_cast<int>(x);
  }
  std::uint64_t seed(const std::string& key, std::uint64_t fallback) {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_number_unsigned()) throw ConfigError("expected a non-negative integer", at(key));
    return v->get<std::uint64_t>();
  }
  bool boolean(const std::string& key, bool fallback) {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_boolean()) throw ConfigError("expected true or false", at(key));
    return v->get<bool>();
  }
  std::string string(const std::string& key, const std::string& fallback) {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_string()) throw ConfigError("expected a string", at(key));
    return v->get<std::string>();
  }
  std::optional<Vec> vec(const std::string& key) {
    const json* v = find(key);
    if (v == nullptr) return std::nullopt;
    return as_vec(*v, at(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (seen_.count(it.key()) == 0) throw ConfigError("unknown key", at(it.key()));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& message, const std::string& path) {
  if (!ok) throw ConfigError(message, path);
}

std::vector<double> to_list(const Vec& v) { return {v.data(), v.data() + v.size()}; }

void parse_plant(const json& j, PlantConfig& p) {
  Fields f(j, "plant");
  p.kind = f.string("kind", "pendulum");
  if (p.kind == "pendulum") {
    const int links = f.integer("links", 1);
    require(links >= 1 && links <= 3, "links must be 1, 2 or 3", f.at("links"));
    p.pendulum = default_pendulum_params(links);
    const std::string model = f.string("link_model", "point_mass");
    if (model == "point_mass") {
      p.pendulum.link_model = LinkModel::kPointMass;
    } else if (model == "rod") {
      p.pendulum.link_model = LinkModel::kRod;
    } else {
      throw ConfigError("expected point_mass or rod", f.at("link_model"));
    }
    if (auto m = f.vec("mass")) {
      require(m->size() == links, "needs one entry per link", f.at("mass"));
      p.pendulum.mass = to_list(*m);
    }
    if (auto l = f.vec("length")) {
      require(l->size() == links, "needs one entry per link", f.at("length"));
      p.pendulum.length = to_list(*l);
    }
    p.pendulum.gravity = f.number("gravity", p.pendulum.gravity);
    for (int i = 0; i < links; ++i) {
      require(p.pendulum.mass[i] > 0.0, "must be positive", fmt::format("plant.mass[{}]", i));
      require(p.pendulum.length[i] > 0.0, "must be positive",
              fmt::format("plant.length[{}]", i));
    }
    require(p.pendulum.gravity > 0.0, "must be positive", f.at("gravity"));
  } else if (p.kind == "cartpole") {
    auto& c = p.cartpole;
    c.cart_mass = f.number("cart_mass", c.cart_mass);
    c.pole_mass = f.number("pole_mass", c.pole_mass);
    c.pole_length = f.number("pole_length", c.pole_length);
    c.gravity = f.number("gravity", c.gravity);
    const std::pair<const char*, double> values[] = {{"cart_mass", c.cart_mass},
                                                     {"pole_mass", c.pole_mass},
                                                     {"pole_length", c.pole_length},
                                                     {"gravity", c.gravity}};
    for (const auto& [key, v] : values) require(v > 0.0, "must be positive", f.at(key));
  } else if (p.kind == "vehicle") {
    p.vehicle.speed = f.number("speed", p.vehicle.speed);
    p.vehicle.wheelbase = f.number("wheelbase", p.vehicle.wheelbase);
    require(p.vehicle.speed > 0.0, "must be positive", f.at("speed"));
    require(p.vehicle.wheelbase > 0.0, "must be positive", f.at("wheelbase"));
  } else {
    throw ConfigError("expected pendulum, cartpole or vehicle", f.at("kind"));
  }
  if (const json* d = f.find("domain")) {
    Fields df(*d, "plant.domain");
    p.domain_lo = as_vec(df.require("lo"), "plant.domain.lo");
    p.domain_hi = as_vec(df.require("hi"), "plant.domain.hi");
    df.finish();
  }
  f.finish();
}

PlantSpec build_plant(const PlantConfig& p) {
  PlantSpec plant = p.kind == "pendulum" ? pendulum_nlink(p.pendulum)
                    : p.kind == "cartpole" ? cartpole(p.cartpole)
                                           : wheeled_vehicle(p.vehicle);
  if (p.domain_lo) {
    require(p.domain_lo->size() == plant.n && p.domain_hi->size() == plant.n,
            fmt::format("domain needs {} entries", plant.n), "plant.domain");
    require(((*p.domain_lo).array() < (*p.domain_hi).array()).all(),
            "lo must be below hi", "plant.domain");
    require(((*p.domain_lo).array() < 0.0).all() && ((*p.domain_hi).array() > 0.0).all(),
            "domain must contain the origin in its interior", "plant.domain");
    plant.state_domain = Box{*p.domain_lo, *p.domain_hi};
  }
  return plant;
}

void parse_stability(const json& j, StabilityConfig& s, int n) {
  Fields f(j, "stability");
  const Vec q = as_vec(f.require("q_diag"), "stability.q_diag");
  require(q.size() == n, fmt::format("needs {} entries", n), "stability.q_diag");
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    require(q[i] > 0.0, "must be positive (Q positive definite)",
            fmt::format("stability.q_diag[{}]", i));
  }
  const double alpha = f.number("alpha", 0.5);
  require(alpha > 0.0, "must be positive", f.at("alpha"));
  const double eps = f.number("eps_grad", 1e-12);
  require(eps > 0.0, "must be positive", f.at("eps_grad"));
  const int rows = f.integer("rows_a", 0);
  require(rows >= 0, "must be non-negative (0 means n)", f.at("rows_a"));
  f.finish();
  s = make_stability_config(q, alpha, eps, rows);
}

void parse_train(const json& j, ExperimentConfig& c) {
  Fields f(j, "train");
  TrainConfig& t = c.train;
  t.epochs = f.integer("epochs", t.epochs);
  require(t.epochs >= 1, "must be >= 1", f.at("epochs"));
  t.batch_size = f.integer("batch_size", t.batch_size);
  require(t.batch_size >= 1, "must be >= 1", f.at("batch_size"));
  t.adam.lr = f.number("lr", t.adam.lr);
  require(t.adam.lr > 0.0, "must be positive", f.at("lr"));
  t.adam.lr_decay = f.number("lr_decay", t.adam.lr_decay);
  require(t.adam.lr_decay > 0.0 && t.adam.lr_decay <= 1.0, "must lie in (0, 1]",
          f.at("lr_decay"));
  t.seed = f.seed("seed", t.seed);
  const int ntrain = f.integer("train_samples", static_cast<int>(c.train_samples));
  const int nval = f.integer("val_samples", static_cast<int>(c.val_samples));
  require(ntrain >= 1, "must be >= 1", f.at("train_samples"));
  require(nval >= 1, "must be >= 1", f.at("val_samples"));
  c.train_samples = static_cast<std::size_t>(ntrain);
  c.val_samples = static_cast<std::size_t>(nval);
  if (const json* h = f.find("hidden")) {
    if (!h->is_array() || h->empty()) throw ConfigError("expected a non-empty array", f.at("hidden"));
    t.hidden.clear();
    for (std::size_t i = 0; i < h->size(); ++i) {
      const std::string path = fmt::format("train.hidden[{}]", i);
      const long long w = as_integer((*h)[i], path);
      require(w >= 1 && w <= 100000, "must be a positive width", path);
      t.hidden.push_back(static_cast<int>(w));
    }
  }
  t.dropout.p_drop = f.number("dropout", 0.0);
  require(t.dropout.p_drop >= 0.0 && t.dropout.p_drop < 1.0, "must lie in [0, 1)",
          f.at("dropout"));
  t.clip_norm = f.number("clip_norm", t.clip_norm);
  require(t.clip_norm >= 0.0, "must be non-negative", f.at("clip_norm"));
  t.ghat_zero_anchor = f.boolean("ghat_zero_anchor", t.ghat_zero_anchor);
  t.pi_zero_anchor = f.boolean("pi_zero_anchor", t.pi_zero_anchor);
  f.finish();
}

void parse_roa(const json& j, RoaConfig& r, int n) {
  Fields f(j, "roa");
  SimOptions& sim = r.thresholds.sim;
  sim.horizon = f.number("horizon", sim.horizon);
  sim.step = f.number("step", sim.step);
  sim.avg_window = f.number("avg_window", sim.avg_window);
  require(sim.horizon > 0.0, "must be positive", f.at("horizon"));
  require(sim.step > 0.0 && sim.step <= sim.horizon, "must lie in (0, horizon]", f.at("step"));
  require(sim.avg_window > 0.0, "must be positive", f.at("avg_window"));
  r.thresholds.energy_rel = f.number("energy_rel", r.thresholds.energy_rel);
  r.thresholds.final_radius_frac = f.number("final_radius_frac", r.thresholds.final_radius_frac);
  r.thresholds.min_membership_frac =
      f.number("min_membership_frac", r.thresholds.min_membership_frac);
  require(r.thresholds.energy_rel > 0.0, "must be positive", f.at("energy_rel"));
  require(r.thresholds.final_radius_frac > 0.0, "must be positive", f.at("final_radius_frac"));
  require(r.thresholds.min_membership_frac >= 0.0 && r.thresholds.min_membership_frac <= 1.0,
          "must lie in [0, 1]", f.at("min_membership_frac"));
  r.samples = f.integer("samples", r.samples);
  require(r.samples >= 1, "must be >= 1", f.at("samples"));
  r.seed = f.seed("seed", r.seed);
  r.region_scale = f.number("region_scale", r.region_scale);
  require(r.region_scale > 0.0 && r.region_scale <= 1.0, "must lie in (0, 1]",
          f.at("region_scale"));
  if (const json* s = f.find("slice")) {
    Fields sf(*s, "roa.slice");
    r.slice_x = sf.integer("x", r.slice_x);
    r.slice_y = sf.integer("y", r.slice_y);
    r.slice_resolution = sf.integer("resolution", r.slice_resolution);
    sf.finish();
  }
  require(r.slice_x >= 0 && r.slice_x < n && r.slice_y >= 0 && r.slice_y < n &&
              r.slice_x != r.slice_y,
          "slice coordinates must be two distinct state indices", "roa.slice");
  require(r.slice_resolution >= 2, "must be >= 2", "roa.slice.resolution");
  f.finish();
}

void parse_lqr(const json& j, LqrConfig& l, int n, int m) {
  Fields f(j, "lqr");
  if (auto q = f.vec("q_diag")) {
    require(q->size() == n, fmt::format("needs {} entries", n), f.at("q_diag"));
    require((q->array() >= 0.0).all(), "must be non-negative", f.at("q_diag"));
    l.q_diag = *q;
  }
  if (auto r = f.vec("r_diag")) {
    require(r->size() == m, fmt::format("needs {} entries", m), f.at("r_diag"));
    require((r->array() > 0.0).all(), "must be positive", f.at("r_diag"));
    l.r_diag = *r;
  }
  l.h = f.number("h", l.h);
  require(l.h > 0.0, "must be positive", f.at("h"));
  f.finish();
}

void parse_iterate(const json& j, IterateConfig& it) {
  Fields f(j, "iterate");
  it.rounds = f.integer("rounds", it.rounds);
  require(it.rounds >= 1, "must be >= 1", f.at("rounds"));
  it.initial_scale = f.number("initial_scale", it.initial_scale);
  require(it.initial_scale > 0.0 && it.initial_scale <= 1.0, "must lie in (0, 1]",
          f.at("initial_scale"));
  it.shrink = f.number("shrink", it.shrink);
  require(it.shrink >= 0.0 && it.shrink < 0.5, "must lie in [0, 0.5)", f.at("shrink"));
  it.policy_fraction = f.number("policy_fraction", it.policy_fraction);
  require(it.policy_fraction >= 0.0 && it.policy_fraction <= 1.0, "must lie in [0, 1]",
          f.at("policy_fraction"));
  f.finish();
}

void parse_mc(const json& j, McDropoutConfig& mc, int n) {
  Fields f(j, "mc_dropout");
  mc.p_drop = f.number("p_drop", mc.p_drop);
  require(mc.p_drop > 0.0 && mc.p_drop < 1.0, "must lie in (0, 1)", f.at("p_drop"));
  mc.runs = f.integer("runs", mc.runs);
  require(mc.runs >= 1, "must be >= 1", f.at("runs"));
  mc.resolution = f.integer("resolution", mc.resolution);
  require(mc.resolution >= 2, "must be >= 2", f.at("resolution"));
  mc.dim_x = f.integer("x", mc.dim_x);
  mc.dim_y = f.integer("y", mc.dim_y);
  require(mc.dim_x >= 0 && mc.dim_x < n && mc.dim_y >= 0 && mc.dim_y < n &&
              mc.dim_x != mc.dim_y,
          "grid coordinates must be two distinct state indices", "mc_dropout");
  mc.seed = f.seed("seed", mc.seed);
  f.finish();
}

void parse_portrait(const json& j, PhasePortraitConfig& pp, int n) {
  Fields f(j, "phase_portrait");
  pp.dim_x = f.integer("x", pp.dim_x);
  pp.dim_y = f.integer("y", pp.dim_y);
  require(pp.dim_x >= 0 && pp.dim_x < n && pp.dim_y >= 0 && pp.dim_y < n &&
              pp.dim_x != pp.dim_y,
          "portrait coordinates must be two distinct state indices", "phase_portrait");
  pp.resolution = f.integer("resolution", pp.resolution);
  require(pp.resolution >= 2, "must be >= 2", f.at("resolution"));
  pp.horizon = f.number("horizon", pp.horizon);
  require(pp.horizon > 0.0, "must be positive", f.at("horizon"));
  f.finish();
}

}  // namespace

PlantSpec ExperimentConfig::make_plant() const { return build_plant(plant); }

ExperimentConfig parse_experiment_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("malformed document at byte {}", e.byte), "<root>");
  }
  Fields f(root, "");
  const std::string schema = f.string("schema", "");
  if (schema != kExperimentSchema) {
    throw ConfigError(fmt::format("expected \"{}\"", kExperimentSchema), "schema");
  }
  ExperimentConfig c;
  c.name = f.string("name", "");
  parse_plant(f.require("plant"), c.plant);
  const PlantSpec plant = build_plant(c.plant);
  parse_stability(f.require("stability"), c.stability, plant.n);
  if (const json* t = f.find("train")) parse_train(*t, c);
  c.train.stability = c.stability;
  c.train.control_limit = plant.control_limit();
  if (const json* r = f.find("roa")) {
    parse_roa(*r, c.roa, plant.n);
  } else {
    parse_roa(json::object(), c.roa, plant.n);
  }
  if (const json* l = f.find("lqr")) parse_lqr(*l, c.lqr, plant.n, plant.m);
  if (const json* it = f.find("iterate")) parse_iterate(*it, c.iterate);
  if (const json* mc = f.find("mc_dropout")) {
    parse_mc(*mc, c.mc_dropout, plant.n);
  } else {
    parse_mc(json::object(), c.mc_dropout, plant.n);
  }
  if (const json* pp = f.find("phase_portrait")) {
    parse_portrait(*pp, c.phase_portrait, plant.n);
  } else {
    parse_portrait(json::object(), c.phase_portrait, plant.n);
  }
  if (const json* xs = f.find("initial_states")) {
    if (!xs->is_array()) throw ConfigError("expected an array of states", "initial_states");
    for (std::size_t i = 0; i < xs->size(); ++i) {
      const std::string path = fmt::format("initial_states[{}]", i);
      Vec x = as_vec((*xs)[i], path);
      require(x.size() == plant.n, fmt::format("needs {} entries", plant.n), path);
      c.initial_states.push_back(std::move(x));
    }
  }
  f.finish();
  c.train.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError(path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_experiment_config(buffer.str());
}

}  // namespace nicon

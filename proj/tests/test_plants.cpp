#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "nicon/errors.hpp"
#include "nicon/plants.hpp"
#include "test_util.hpp"

using namespace nicon;

namespace {

std::vector<PlantSpec> all_plants() {
  return {pendulum_nlink(default_pendulum_params(1)), pendulum_nlink(default_pendulum_params(2)),
          pendulum_nlink(default_pendulum_params(3)), cartpole({}), wheeled_vehicle({})};
}

Vec random_in(const Box& box, Rng& rng) { return sample_uniform_box(rng, box.lo, box.hi); }

}  // namespace

TEST(Plants, OriginIsEquilibrium) {
  for (const auto& p : all_plants()) {
    EXPECT_LE(p.deriv(Vec::Zero(p.n), Vec::Zero(p.m)).cwiseAbs().maxCoeff(), 1e-10) << p.name;
    EXPECT_TRUE(p.equilibrium.isZero());
  }
}

TEST(Plants, ShapeMismatchThrows) {
  const PlantSpec p = pendulum_nlink(default_pendulum_params(2));
  EXPECT_THROW(p.deriv(Vec::Zero(3), Vec::Zero(2)), ConfigError);
  EXPECT_THROW(p.deriv(Vec::Zero(4), Vec::Zero(1)), ConfigError);
}

TEST(Pendulum, InputBoundScalesWithLinks) {
  for (int n = 1; n <= 3; ++n) {
    const PlantSpec p = pendulum_nlink(default_pendulum_params(n));
    EXPECT_EQ(p.n, 2 * n);
    EXPECT_EQ(p.m, n);
    EXPECT_NEAR(p.input_bound, 10.0 * std::sqrt(n), 1e-12);
    EXPECT_NEAR(p.control_limit().norm(), p.input_bound, 1e-12);
  }
  EXPECT_THROW(pendulum_nlink(default_pendulum_params(4)), ConfigError);
}

TEST(Pendulum, SingleLinkFallsAwayFromUpright) {
  const PlantSpec p = pendulum_nlink(default_pendulum_params(1));
  const Vec d = p.deriv((Vec(2) << 1e-4, 0.0).finished(), Vec::Zero(1));
  EXPECT_NEAR(d[0], 0.0, 1e-15);
  EXPECT_NEAR(d[1], 9.81 * 1e-4, 1e-9);  // omega' = (g / l) theta
}

TEST(Pendulum, SingleLinkTorqueGain) {
  // m = l = 1: omega' = u / (m l^2) at the upright posture
  const PlantSpec p = pendulum_nlink(default_pendulum_params(1));
  EXPECT_NEAR(p.deriv(Vec::Zero(2), Vec::Constant(1, 2.5))[1], 2.5, 1e-12);
}

TEST(Pendulum, MatchesHangingFormAfterShift) {
  Rng rng(1);
  for (int n = 1; n <= 3; ++n) {
    for (const LinkModel model : {LinkModel::kPointMass, LinkModel::kRod}) {
      PendulumParams params = default_pendulum_params(n);
      params.link_model = model;
      params.mass = std::vector<double>(n, 0.7);
      const PlantSpec p = pendulum_nlink(params);
      for (int k = 0; k < 100; ++k) {
        const Vec x = random_in(p.state_domain, rng);
        const Vec u = p.sample_input(rng);
        Vec z = x;
        z.head(n).array() += std::numbers::pi;
        const Vec a = p.deriv(x, u);
        const Vec b = pendulum_hanging_deriv(params, z, u);
        EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-9 * (1.0 + a.norm()));
      }
    }
  }
}

TEST(Pendulum, EnergyConservedWithoutInput) {
  Rng rng(2);
  for (const LinkModel model : {LinkModel::kPointMass, LinkModel::kRod}) {
    PendulumParams params = default_pendulum_params(2);
    params.link_model = model;
    const PlantSpec p = pendulum_nlink(params);
    const Vec u0 = Vec::Zero(2);
    Vec x = random_in(p.state_domain, rng);
    const double e0 = pendulum_energy(params, x);
    const VectorField f = [&](const Vec& s) { return p.deriv(s, u0); };
    for (int k = 0; k < 5000; ++k) x = rk4_step(f, x, 1e-3);
    EXPECT_LT(std::abs(pendulum_energy(params, x) - e0), 1e-5 * std::abs(e0));
  }
}

// Power balance: dE/dt = u . omega for generalized torques.
TEST(Pendulum, InputPowerBalance) {
  Rng rng(3);
  const PendulumParams params = default_pendulum_params(3);
  const PlantSpec p = pendulum_nlink(params);
  for (int k = 0; k < 20; ++k) {
    const Vec x = random_in(p.state_domain, rng);
    const Vec u = p.sample_input(rng);
    const Vec dx = p.deriv(x, u);
    const double h = 1e-6;
    const double de = (pendulum_energy(params, x + h * dx) - pendulum_energy(params, x - h * dx)) /
                      (2 * h);
    EXPECT_NEAR(de, u.dot(x.tail(3)), 1e-6);
  }
}

TEST(Pendulum, ControlAffine) {
  Rng rng(4);
  for (int n = 1; n <= 3; ++n) {
    const PlantSpec p = pendulum_nlink(default_pendulum_params(n));
    for (int k = 0; k < 20; ++k) {
      const Vec x = random_in(p.state_domain, rng);
      const Vec u = 0.5 * p.sample_input(rng);
      const Vec f0 = p.deriv(x, Vec::Zero(n));
      const Vec g1 = p.deriv(x, u) - f0;
      const Vec g2 = p.deriv(x, 2.0 * u) - f0;
      EXPECT_LE((g2 - 2.0 * g1).cwiseAbs().maxCoeff(), 1e-9);
    }
  }
}

TEST(CartPole, Examples) {
  const PlantSpec p = cartpole({});
  EXPECT_EQ(p.input_bound, 50.0);
  const Vec tilt = (Vec(4) << 0.0, 0.01, 0.0, 0.0).finished();
  EXPECT_GT(p.deriv(tilt, Vec::Zero(1))[3], 0.0);
  EXPECT_LT(p.deriv(-tilt, Vec::Zero(1))[3], 0.0);
  EXPECT_GT(p.deriv(Vec::Zero(4), Vec::Constant(1, 5.0))[2], 0.0);
  EXPECT_EQ(p.saturated_dims, (std::vector<int>{0, 2}));
  EXPECT_EQ(p.verdict_dims, (std::vector<int>{1, 3}));
}

TEST(CartPole, MatchesHangingFormAfterShift) {
  Rng rng(5);
  const CartPoleParams params;
  const PlantSpec p = cartpole(params);
  for (int k = 0; k < 100; ++k) {
    const Vec x = random_in(p.state_domain, rng);
    const Vec u = p.sample_input(rng);
    Vec z = x;
    z[1] += std::numbers::pi;
    EXPECT_LE((p.deriv(x, u) - cartpole_hanging_deriv(params, z, u)).cwiseAbs().maxCoeff(),
              1e-9);
  }
}

TEST(Vehicle, Examples) {
  const VehicleParams params{2.0, 1.0};
  const PlantSpec p = wheeled_vehicle(params);
  EXPECT_NEAR(p.input_bound, std::numbers::pi / 6, 1e-15);
  EXPECT_GT(p.deriv((Vec(2) << 0.0, 0.05).finished(), Vec::Zero(1))[0], 0.0);
  EXPECT_NEAR(p.deriv(Vec::Zero(2), Vec::Constant(1, std::numbers::pi / 6))[1], 2.0 * 0.5, 1e-12);
}

// Straight path along the world x-axis: crosstrack = p_y, heading = psi.
TEST(Vehicle, MatchesWorldFrameModel) {
  Rng rng(6);
  const VehicleParams params{2.0, 1.0};
  const PlantSpec p = wheeled_vehicle(params);
  for (int k = 0; k < 100; ++k) {
    const Vec x = random_in(p.state_domain, rng);
    const Vec u = p.sample_input(rng);
    const Vec pose = (Vec(3) << rng.uniform(-5.0, 5.0), x[0], x[1]).finished();
    const Vec dpose = vehicle_pose_deriv(params, pose, u);
    const Vec dx = p.deriv(x, u);
    EXPECT_NEAR(dx[0], dpose[1], 1e-12);
    EXPECT_NEAR(dx[1], dpose[2], 1e-12);
  }
}

TEST(Box, ScaledShrunkContains) {
  const Box b{(Vec(2) << -1.0, -2.0).finished(), (Vec(2) << 3.0, 2.0).finished()};
  const Box s = b.scaled(0.5);
  EXPECT_TRUE(s.lo.isApprox((Vec(2) << 0.0, -1.0).finished()));
  EXPECT_TRUE(s.hi.isApprox((Vec(2) << 2.0, 1.0).finished()));
  const Box k = b.shrunk(0.1);
  EXPECT_TRUE(k.lo.isApprox((Vec(2) << -0.6, -1.6).finished()));
  EXPECT_TRUE(b.contains(k));
  EXPECT_FALSE(k.contains(b));
  EXPECT_TRUE(b.contains((Vec(2) << 3.0, 0.0).finished()));
  EXPECT_FALSE(b.contains((Vec(2) << 3.1, 0.0).finished()));
}

TEST(Inputs, SampledInputsRespectBound) {
  Rng rng(7);
  for (const auto& p : all_plants()) {
    for (int k = 0; k < 2000; ++k) {
      const Vec u = p.sample_input(rng);
      ASSERT_TRUE(p.input_admissible(u)) << p.name;
    }
  }
}

TEST(Dataset, ZeroInputGivesEqualDerivatives) {
  Rng rng(8);
  const PlantSpec p = pendulum_nlink(default_pendulum_params(2));
  const Dataset d = generate_dataset(p, 1, rng, InputSampling::kZero);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.samples[0].dxdt_u, d.samples[0].dxdt_0);
}

TEST(Dataset, RespectsDomainAndBound) {
  for (const auto& p : all_plants()) {
    const DatasetSplits s = generate_splits(p, 500, 200, 3, p.state_domain);
    EXPECT_NO_THROW(validate_dataset(s.train, p));
    EXPECT_NO_THROW(validate_dataset(s.val, p));
    EXPECT_EQ(s.val.split, Split::kVal);
    // independent streams: no shared state
    EXPECT_NE(s.train.samples[0].x, s.val.samples[0].x);
  }
}

TEST(Dataset, ControlEffectIsAffine) {
  Rng rng(9);
  const PlantSpec p = pendulum_nlink(default_pendulum_params(1));
  const Dataset d = generate_dataset(p, 50, rng);
  for (const auto& s : d.samples) {
    const Vec g = s.dxdt_u - s.dxdt_0;
    const Vec g2 = p.deriv(s.x, 2.0 * s.u) - s.dxdt_0;
    EXPECT_LE((g2 - 2.0 * g).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Dataset, FileRoundTripAndDeterminism) {
  const auto dir = testutil::temp_dir("dataset");
  const PlantSpec p = cartpole({});
  const DatasetSplits a = generate_splits(p, 100, 50, 11, p.state_domain);
  const DatasetSplits b = generate_splits(p, 100, 50, 11, p.state_domain);
  write_dataset(a.train, dir / "a.csv");
  write_dataset(b.train, dir / "b.csv");
  EXPECT_EQ(testutil::slurp(dir / "a.csv"), testutil::slurp(dir / "b.csv"));
  EXPECT_EQ(testutil::slurp(dir / "a.csv.meta.json"), testutil::slurp(dir / "b.csv.meta.json"));
  const std::string text = testutil::slurp(dir / "a.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')), "x0,x1,x2,x3,u0,fu0,fu1,fu2,fu3,f00,f01,f02,f03");

  const Dataset r = read_dataset(dir / "a.csv", p);
  ASSERT_EQ(r.size(), a.train.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_EQ(r.samples[i].x, a.train.samples[i].x);
    EXPECT_EQ(r.samples[i].u, a.train.samples[i].u);
    EXPECT_EQ(r.samples[i].dxdt_u, a.train.samples[i].dxdt_u);
    EXPECT_EQ(r.samples[i].dxdt_0, a.train.samples[i].dxdt_0);
  }
  EXPECT_EQ(r.seed, a.train.seed);
}

TEST(Dataset, LoadRejectsBadFiles) {
  const auto dir = testutil::temp_dir("dataset_bad");
  const PlantSpec p = pendulum_nlink(default_pendulum_params(1));
  EXPECT_THROW(read_dataset(dir / "missing.csv", p), MissingFileError);

  Rng rng(12);
  Dataset d = generate_dataset(p, 3, rng);
  d.samples[1].u = Vec::Constant(1, 11.0);  // beyond the bound of 10
  write_dataset(d, dir / "over.csv");
  EXPECT_THROW(read_dataset(dir / "over.csv", p), ConfigError);

  const PlantSpec other = wheeled_vehicle({});
  d = generate_dataset(p, 3, rng);
  write_dataset(d, dir / "ok.csv");
  EXPECT_THROW(read_dataset(dir / "ok.csv", other), ConfigError);

  {
    std::ofstream out(dir / "ok.csv", std::ios::app);
    out << "1,2,3\n";
  }
  EXPECT_THROW(read_dataset(dir / "ok.csv", p), LoadError);
}

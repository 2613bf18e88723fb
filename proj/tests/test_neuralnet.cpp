#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "nicon/errors.hpp"
#include "nicon/neuralnet.hpp"
#include "test_util.hpp"

using namespace nicon;

namespace {

MlpParams one_hidden_example() {
  MlpParams p;
  Layer h;
  h.weight = Mat::Constant(1, 1, 1.0);
  h.bias = Vec::Constant(1, -0.5);
  h.activation = Activation::kRelu;
  Layer o;
  o.weight = Mat::Constant(1, 1, 2.0);
  o.bias = Vec::Zero(1);
  p.layers = {h, o};
  return p;
}

double scalar_loss(const MlpParams& net, const Vec& x, const Vec& w) {
  return w.dot(forward(net, x));
}

}  // namespace

TEST(Forward, ZeroWeightsGiveZero) {
  Rng rng(1);
  MlpParams p = make_mlp(3, {5, 4}, 2, rng);
  for (auto& l : p.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  EXPECT_EQ(forward(p, Vec::Constant(3, 7.0)), Vec::Zero(2));
}

TEST(Forward, IdentityLayer) {
  MlpParams p;
  p.layers = {Layer{Mat::Identity(2, 2), Vec::Zero(2), Activation::kIdentity}};
  const Vec x = (Vec(2) << 3.0, -1.0).finished();
  EXPECT_EQ(forward(p, x), x);
}

TEST(Forward, HandComputedOneHidden) {
  const MlpParams p = one_hidden_example();
  EXPECT_DOUBLE_EQ(forward(p, Vec::Ones(1))[0], 1.0);
  EXPECT_DOUBLE_EQ(forward(p, Vec::Zero(1))[0], 0.0);
}

TEST(Forward, DimensionMismatchThrows) {
  Rng rng(1);
  const MlpParams p = make_mlp(3, {4}, 2, rng);
  EXPECT_THROW(forward(p, Vec::Ones(2)), ConfigError);
}

TEST(Forward, OffModeIsDeterministic) {
  Rng rng(2);
  const MlpParams p = make_mlp(4, {16, 16}, 3, rng);
  const Vec x = Vec::LinSpaced(4, -1.0, 1.0);
  DropoutSpec off{0.5, DropoutMode::kOff};
  Rng r1(1), r2(99);
  EXPECT_EQ(forward(p, x, off, &r1), forward(p, x, off, &r2));
}

TEST(Forward, BatchMatchesSingle) {
  Rng rng(3);
  const MlpParams p = make_mlp(3, {8, 8}, 2, rng);
  Mat x = Mat::Random(3, 5);
  const Mat y = forward_batch(p, x);
  for (int c = 0; c < 5; ++c) {
    EXPECT_TRUE(y.col(c).isApprox(forward(p, x.col(c)), 1e-14));
  }
}

TEST(MakeMlp, GlorotRangeAndZeroBias) {
  Rng rng(4);
  const MlpParams p = make_mlp(6, {64, 64, 64}, 4, rng);
  ASSERT_EQ(p.layers.size(), 4u);
  for (const auto& l : p.layers) {
    const double limit = std::sqrt(6.0 / (l.weight.rows() + l.weight.cols()));
    EXPECT_LE(l.weight.cwiseAbs().maxCoeff(), limit);
    EXPECT_TRUE(l.bias.isZero());
  }
  EXPECT_EQ(p.layers[0].activation, Activation::kRelu);
  EXPECT_EQ(p.layers.back().activation, Activation::kIdentity);
  EXPECT_EQ(p.hidden_dims(), (std::vector<int>{64, 64, 64}));
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(5);
  const MlpParams p = make_mlp(3, {6}, 2, rng);
  MlpTape tape;
  forward(p, Vec::Ones(3), {}, nullptr, &tape);
  const BackwardResult g = backward(p, tape, Vec::Zero(2));
  EXPECT_EQ(g.params.squared_norm(), 0.0);
  EXPECT_TRUE(g.input.isZero());
}

TEST(Backward, ScalarLinearBaseCase) {
  MlpParams p;
  p.layers = {Layer{Mat::Constant(1, 1, 1.7), Vec::Zero(1), Activation::kIdentity}};
  MlpTape tape;
  forward(p, Vec::Constant(1, -0.4), {}, nullptr, &tape);
  const BackwardResult g = backward(p, tape, Vec::Ones(1));
  EXPECT_DOUBLE_EQ(g.params.weight[0](0, 0), -0.4);
  EXPECT_DOUBLE_EQ(g.params.bias[0][0], 1.0);
  EXPECT_DOUBLE_EQ(g.input[0], 1.7);
}

TEST(Backward, ReluSubgradientAtZeroIsZero) {
  // hidden pre-activation exactly 0 at x = 0.5
  const MlpParams p = one_hidden_example();
  MlpTape tape;
  forward(p, Vec::Constant(1, 0.5), {}, nullptr, &tape);
  const BackwardResult g = backward(p, tape, Vec::Ones(1));
  EXPECT_EQ(g.input[0], 0.0);
  EXPECT_EQ(g.params.weight[0](0, 0), 0.0);
}

// Central differences, step 1e-5, on 20 random nets per architecture in use.
TEST(Backward, MatchesFiniteDifferences) {
  const std::vector<std::vector<int>> architectures = {{64, 64, 64}, {16, 16}, {8}};
  const std::vector<Activation> acts = {Activation::kRelu, Activation::kTanh};
  Rng rng(6);
  int probes = 0;
  for (const auto& hidden : architectures) {
    for (const Activation act : acts) {
      for (int trial = 0; trial < 20; ++trial) {
        const int in = 2 + static_cast<int>(rng.below(6));
        const int out = 1 + static_cast<int>(rng.below(4));
        MlpParams p = make_mlp(in, hidden, out, rng, act);
        for (auto& l : p.layers) {
          for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = rng.uniform(-0.3, 0.3);
        }
        Vec x(in), w(out);
        for (int i = 0; i < in; ++i) x[i] = rng.uniform(-1.0, 1.0);
        for (int i = 0; i < out; ++i) w[i] = rng.uniform(-1.0, 1.0);
        MlpTape tape;
        forward(p, x, {}, nullptr, &tape);
        const BackwardResult g = backward(p, tape, w);

        // a few weight entries per layer, every bias of the last layer, every input
        for (std::size_t li = 0; li < p.layers.size(); ++li) {
          for (int k = 0; k < 3; ++k) {
            const auto r = static_cast<Eigen::Index>(rng.below(p.layers[li].weight.rows()));
            const auto c = static_cast<Eigen::Index>(rng.below(p.layers[li].weight.cols()));
            const double fd = testutil::central_difference(
                [&](double v) {
                  MlpParams q = p;
                  q.layers[li].weight(r, c) = v;
                  return scalar_loss(q, x, w);
                },
                p.layers[li].weight(r, c));
            testutil::expect_rel_close(g.params.weight[li](r, c), fd, 1e-4, 1e-9);
            ++probes;
          }
        }
        for (int i = 0; i < in; ++i) {
          const double fd = testutil::central_difference(
              [&](double v) {
                Vec y = x;
                y[i] = v;
                return scalar_loss(p, y, w);
              },
              x[i]);
          testutil::expect_rel_close(g.input[i], fd, 1e-4, 1e-9);
        }
      }
    }
  }
  EXPECT_GE(probes, 20);
}

TEST(Backward, BatchAccumulatesPerSampleGradients) {
  Rng rng(7);
  const MlpParams p = make_mlp(3, {10, 10}, 2, rng);
  const Mat x = Mat::Random(3, 4);
  const Mat up = Mat::Random(2, 4);
  MlpTape tape;
  forward_batch(p, x, nullptr, &tape);
  MlpGrads batch = MlpGrads::zeros_like(p);
  backward_batch(p, tape, up, &batch);
  MlpGrads sum = MlpGrads::zeros_like(p);
  for (int c = 0; c < 4; ++c) {
    MlpTape t;
    forward(p, x.col(c), {}, nullptr, &t);
    const BackwardResult g = backward(p, t, up.col(c));
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      sum.weight[l] += g.params.weight[l];
      sum.bias[l] += g.params.bias[l];
    }
  }
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    EXPECT_TRUE(batch.weight[l].isApprox(sum.weight[l], 1e-12));
    EXPECT_TRUE(batch.bias[l].isApprox(sum.bias[l], 1e-12));
  }
}

TEST(Dropout, MaskValuesAndKeptFraction) {
  Rng rng(8);
  const MlpParams p = make_mlp(2, {64, 64, 64}, 2, rng);
  const DropoutSpec spec{0.2, DropoutMode::kMcInference};
  std::vector<double> kept(3, 0.0);
  const int draws = 1000;
  for (int d = 0; d < draws; ++d) {
    const DropoutMask mask = draw_dropout_mask(p, spec, 1, rng);
    ASSERT_EQ(mask.size(), 3u);
    for (std::size_t l = 0; l < 3; ++l) {
      for (Eigen::Index i = 0; i < mask[l].size(); ++i) {
        const double v = mask[l](i);
        ASSERT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.8) < 1e-15);
      }
      kept[l] += (mask[l].array() != 0.0).cast<double>().mean();
    }
  }
  for (double k : kept) EXPECT_NEAR(k / draws, 0.8, 0.04);
}

TEST(Dropout, TrainModeNeedsRngAndChangesOutput) {
  Rng rng(9);
  const MlpParams p = make_mlp(2, {32}, 1, rng);
  const DropoutSpec spec{0.5, DropoutMode::kTrain};
  EXPECT_THROW(forward(p, Vec::Ones(2), spec, nullptr), ConfigError);
  Rng a(1);
  const Vec y1 = forward(p, Vec::Ones(2), spec, &a);
  const Vec y2 = forward(p, Vec::Ones(2), spec, &a);
  EXPECT_NE(y1, y2);
}

TEST(Adam, ZeroGradientLeavesParamsAndCountsStep) {
  Rng rng(10);
  MlpParams p = make_mlp(2, {4}, 1, rng);
  const MlpParams before = p;
  AdamState s = make_adam_state(p, {});
  adam_step(p, MlpGrads::zeros_like(p), s, 0);
  EXPECT_EQ(p, before);
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  MlpParams p;
  p.layers = {Layer{Mat::Constant(1, 1, 1.0), Vec::Zero(1), Activation::kIdentity}};
  AdamState s = make_adam_state(p, {});
  MlpGrads g = MlpGrads::zeros_like(p);
  g.weight[0](0, 0) = 1.0;
  adam_step(p, g, s, 0);
  EXPECT_NEAR(p.layers[0].weight(0, 0), 1.0 - 1e-3, 1e-10);
}

TEST(Adam, DescendsOnSquare) {
  MlpParams p;
  p.layers = {Layer{Mat::Constant(1, 1, 1.0), Vec::Zero(1), Activation::kIdentity}};
  AdamState s = make_adam_state(p, {});
  double prev = 1.0;
  for (int k = 0; k < 100; ++k) {
    MlpGrads g = MlpGrads::zeros_like(p);
    g.weight[0](0, 0) = 2.0 * p.layers[0].weight(0, 0);
    adam_step(p, g, s, 0);
    const double w = std::abs(p.layers[0].weight(0, 0));
    ASSERT_LT(w, prev);
    prev = w;
  }
}

TEST(Adam, LearningRateSchedule) {
  AdamConfig c;
  EXPECT_DOUBLE_EQ(c.learning_rate(0), 1e-3);
  EXPECT_NEAR(c.learning_rate(10), 1e-3 * std::pow(0.99, 10), 1e-18);
}

TEST(Adam, NonFiniteGradientNamesBatch) {
  Rng rng(11);
  MlpParams p = make_mlp(2, {4}, 1, rng);
  AdamState s = make_adam_state(p, {});
  MlpGrads g = MlpGrads::zeros_like(p);
  g.bias[0][1] = std::nan("");
  try {
    adam_step(p, g, s, 3, 17);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.epoch(), 3);
    EXPECT_EQ(e.batch(), 17);
  }
}

TEST(BoundOutput, Examples) {
  const Vec b = Vec::Constant(1, 10.0);
  EXPECT_EQ(bound_output(Vec::Zero(1), b)[0], 0.0);
  EXPECT_NEAR(bound_output(Vec::Constant(1, 10.0), b)[0], 10.0 * std::tanh(1.0), 1e-12);
  EXPECT_NEAR(bound_output(Vec::Constant(1, 10.0), b)[0], 7.6159, 1e-4);
  EXPECT_LT(bound_output(Vec::Constant(1, 1e6), b)[0], 10.0 + 1e-12);
}

TEST(BoundOutput, StrictlyInsideForModerateInputs) {
  Rng rng(12);
  const Vec b = (Vec(3) << 10.0, 0.5, 50.0).finished();
  for (int i = 0; i < 1000; ++i) {
    Vec y(3);
    for (int k = 0; k < 3; ++k) y[k] = rng.uniform(-3.0, 3.0) * b[k];
    const Vec out = bound_output(y, b);
    for (int k = 0; k < 3; ++k) ASSERT_LT(std::abs(out[k]), b[k]);
  }
}

TEST(BoundOutput, BackwardMatchesFiniteDifference) {
  const Vec b = Vec::Constant(1, 2.0);
  for (double y : {-3.0, -0.2, 0.0, 1.1, 4.0}) {
    const Mat g = bound_output_backward(Mat::Constant(1, 1, y), b, Mat::Ones(1, 1));
    const double fd = testutil::central_difference(
        [&](double v) { return bound_output(Vec::Constant(1, v), b)[0]; }, y);
    testutil::expect_rel_close(g(0, 0), fd, 1e-6, 1e-10);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(13);
  MlpParams p = make_mlp(5, {64, 64, 64}, 3, rng, Activation::kTanh);
  p.output_bound = Vec::Constant(3, 1.0 / 3.0);
  p.layers[1].bias[7] = -1.0 / 7.0;
  const MlpParams q = checkpoint_from_string(checkpoint_to_string(p));
  EXPECT_EQ(p, q);
  EXPECT_EQ(p.output_bound, q.output_bound);

  const auto dir = testutil::temp_dir("ckpt");
  save_checkpoint(p, dir / "net.json");
  EXPECT_EQ(load_checkpoint(dir / "net.json"), p);
}

TEST(Checkpoint, MismatchedDimsRejected) {
  Rng rng(14);
  const MlpParams p = make_mlp(2, {3}, 1, rng);
  std::string text = checkpoint_to_string(p);
  const auto pos = text.find("\"input_dim\": 2");
  ASSERT_NE(pos, std::string::npos) << text.substr(0, 300);
  text.replace(pos, 14, "\"input_dim\": 4");
  EXPECT_THROW(checkpoint_from_string(text), LoadError);
}

TEST(Checkpoint, MalformedReportsPosition) {
  try {
    checkpoint_from_string("{\"schema\": \"nicon.mlp.v1\", \"layers\": [");
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos) << e.what();
  }
  EXPECT_THROW(checkpoint_from_string("{\"schema\": \"other.v9\"}"), LoadError);
}

TEST(Checkpoint, MissingFile) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/net.json"), MissingFileError);
}

// a checkpoint stored in the repository by an earlier build still loads
TEST(Checkpoint, StoredFixtureLoads) {
  const MlpParams p = load_checkpoint(testutil::fixture("mlp_v1.json"));
  EXPECT_EQ(p.input_dim(), 2);
  EXPECT_EQ(p.output_dim(), 1);
  EXPECT_DOUBLE_EQ(forward(p, Vec::Ones(2))[0], 1.0);
}

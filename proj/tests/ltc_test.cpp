#include "metadvfs/ltc.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"

namespace metadvfs {
namespace {

RecurrentNet single_cell(double w, double u, double b, double dt, int substeps) {
  NetworkConfig c;
  c.input_dim = 1;
  c.hidden = {1};
  c.output_dim = 1;
  c.steps_per_input = substeps;
  c.dt = dt;
  RecurrentNet net(c, 0);
  net.W_mut(0)(0, 0) = w;
  net.U_mut(0)(0, 0) = u;
  net.b_mut(0)(0) = b;
  net.tau_raw_mut(0)(0) = inverse_softplus(1.0 - c.tau_min);
  net.W_out_mut()(0, 0) = 1.0;
  return net;
}

TEST(LtcStep, HandComputedSingleCell) {
  const auto net = single_cell(0.5, 1.0, 0.0, 0.1, 1);
  EXPECT_NEAR(net.tau(0)(0), 1.0, 1e-15);
  HiddenState h = net.zero_state(1);
  const Matrix y = net.step(h, Matrix::Constant(1, 1, 1.0));
  EXPECT_NEAR(h.h[0](0, 0), 0.1 * std::tanh(1.0), 1e-9);
  EXPECT_NEAR(h.h[0](0, 0), 0.0761594, 1e-7);
  EXPECT_NEAR(y(0, 0), h.h[0](0, 0), 1e-15);
}

TEST(LtcStep, ZeroWeightsDecayInClosedForm) {
  NetworkConfig c;
  c.input_dim = 2;
  c.hidden = {3};
  c.output_dim = 1;
  c.steps_per_input = 100;
  c.dt = 0.05;
  RecurrentNet net(c, 4);
  net.W_mut(0).setZero();
  net.U_mut(0).setZero();
  net.b_mut(0).setZero();
  net.tau_raw_mut(0) << 0.3, 1.2, -0.4;
  HiddenState h = net.zero_state(1);
  h.h[0] << 0.7, -1.3, 2.0;
  const Matrix v = h.h[0];
  net.step(h, Matrix::Random(2, 1));
  const Vector tau = net.tau(0);
  for (int i = 0; i < 3; ++i)
    EXPECT_NEAR(h.h[0](i, 0), v(i, 0) * std::pow(1.0 - c.dt / tau(i), 100), 1e-9);
}

TEST(LtcStep, ZeroInputFixedPoint) {
  NetworkConfig c;
  c.input_dim = 3;
  c.hidden = {4, 2};
  c.output_dim = 2;
  RecurrentNet net(c, 9);
  for (int l = 0; l < 2; ++l) net.b_mut(l).setZero();
  HiddenState h = net.zero_state(1);
  for (int t = 0; t < 50; ++t) net.step(h, Matrix::Zero(3, 1));
  EXPECT_EQ(h.h[0].cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(h.h[1].cwiseAbs().maxCoeff(), 0.0);
}

TEST(LtcStep, ForwardMatchesRepeatedStep) {
  NetworkConfig c;
  c.input_dim = 2;
  c.hidden = {5, 3};
  c.output_dim = 4;
  RecurrentNet net(c, 1);
  std::vector<Matrix> xs;
  for (int t = 0; t < 6; ++t) xs.push_back(Matrix::Random(2, 3));
  const auto tr = net.forward(xs);
  HiddenState h = net.zero_state(3);
  for (int t = 0; t < 6; ++t) {
    const Matrix y = net.step(h, xs[static_cast<std::size_t>(t)]);
    EXPECT_EQ(y, tr.outputs[static_cast<std::size_t>(t)]);
  }
}

TEST(LtcStep, DeterministicInit) {
  NetworkConfig c;
  c.input_dim = 4;
  c.hidden = {6};
  c.output_dim = 3;
  EXPECT_EQ(RecurrentNet(c, 5).params(), RecurrentNet(c, 5).params());
  EXPECT_NE(RecurrentNet(c, 5).params(), RecurrentNet(c, 6).params());
  const RecurrentNet net(c, 5);
  EXPECT_NEAR(net.tau(0)(0), 1.0, 1e-12);
  EXPECT_EQ(net.b(0).cwiseAbs().maxCoeff(), 0.0);
}

TEST(LtcStep, TauStaysPositiveForAnyRawValue) {
  NetworkConfig c;
  c.hidden = {3};
  RecurrentNet net(c, 2);
  net.tau_raw_mut(0) << -1e4, -50.0, 1e3;
  const Vector tau = net.tau(0);
  for (int i = 0; i < 3; ++i) EXPECT_GE(tau(i), c.tau_min);
}

TEST(LtcStep, StiffSettingsRaiseBlowup) {
  NetworkConfig c;
  c.hidden = {2};
  c.dt = 0.25;
  RecurrentNet net(c, 2);
  net.tau_raw_mut(0).setConstant(-40.0);  // tau ~ tau_min, dt/tau ~ 25
  HiddenState h = net.zero_state(1);
  h.h[0].setConstant(0.5);
  EXPECT_THROW(
      {
        for (int t = 0; t < 20; ++t) net.step(h, Matrix::Ones(1, 1));
      },
      NumericalBlowup);
}

TEST(LtcStep, StabilityEnvelope) {
  Rng rng(3);
  for (int trial = 0; trial < 4; ++trial) {
    NetworkConfig c;
    c.input_dim = 3;
    c.hidden = {8, 6};
    c.output_dim = 2;
    c.dt = 0.25;
    RecurrentNet net(c, static_cast<std::uint64_t>(trial));
    // dt <= min(tau) / 2 holds at init (tau = 1)
    ASSERT_LE(c.dt, net.tau(0).minCoeff() / 2);
    HiddenState h = net.zero_state(1);
    std::uniform_real_distribution<double> u(-1, 1);
    double worst = 0;
    for (int t = 0; t < 10000; ++t) {
      Matrix x(3, 1);
      for (int i = 0; i < 3; ++i) x(i, 0) = u(rng);
      net.step(h, x);
      worst = std::max({worst, h.h[0].cwiseAbs().maxCoeff(), h.h[1].cwiseAbs().maxCoeff()});
    }
    EXPECT_LE(worst, 1.0);
  }
}

TEST(LtcBackward, ZeroOutputGradientGivesZeroGradients) {
  NetworkConfig c;
  c.input_dim = 2;
  c.hidden = {3, 2};
  c.output_dim = 2;
  RecurrentNet net(c, 8);
  std::vector<Matrix> xs(5, Matrix::Random(2, 4));
  const auto tr = net.forward(xs);
  const auto g = net.backward(tr, std::vector<Matrix>(5, Matrix::Zero(2, 4)));
  EXPECT_EQ(g.params.cwiseAbs().maxCoeff(), 0.0);
}

TEST(LtcBackward, FiniteDifferenceTwoLayer) {
  NetworkConfig c;
  c.input_dim = 2;
  c.hidden = {3, 2};
  c.output_dim = 2;
  RecurrentNet net(c, 21);
  net.b_mut(0).setRandom();
  net.tau_raw_mut(1) << 0.2, -0.3;
  const auto report = testing_support::gradient_check(net, 10, 3, 77);
  EXPECT_LT(report.max_param_rel_error, 1e-4);
  EXPECT_LT(report.max_input_rel_error, 1e-4);
}

TEST(LtcBackward, SequenceGradientIsSumOfPerStepContributions) {
  NetworkConfig c;
  c.input_dim = 3;
  c.hidden = {4};
  c.output_dim = 2;
  RecurrentNet net(c, 13);
  std::vector<Matrix> xs, dys;
  for (int t = 0; t < 10; ++t) {
    xs.push_back(Matrix::Random(3, 2));
    dys.push_back(Matrix::Random(2, 2));
  }
  const auto tr = net.forward(xs);
  const Vector total = net.backward(tr, dys).params;
  Vector summed = Vector::Zero(total.size());
  for (std::size_t t = 0; t < 10; ++t) {
    std::vector<Matrix> only(10, Matrix());
    only[t] = dys[t];
    summed += net.backward(tr, only).params;
  }
  EXPECT_LT((total - summed).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LtcBackward, RandomShapesProperty) {
  Rng rng(2024);
  std::uniform_int_distribution<int> layers(1, 3), width(1, 8);
  for (int trial = 0; trial < 12; ++trial) {
    NetworkConfig c;
    c.input_dim = width(rng);
    c.hidden.clear();
    for (int l = layers(rng); l > 0; --l) c.hidden.push_back(width(rng));
    c.output_dim = width(rng);
    RecurrentNet net(c, static_cast<std::uint64_t>(trial));
    const auto report = testing_support::gradient_check(net, 10, 2, static_cast<std::uint64_t>(trial));
    EXPECT_LT(report.max_param_rel_error, 1e-4) << "trial " << trial;
  }
}

TEST(LtcBackward, TraceMismatchDetected) {
  NetworkConfig c;
  c.hidden = {2};
  RecurrentNet net(c, 1);
  const auto tr = net.forward({Matrix::Ones(1, 1)});
  EXPECT_THROW(net.backward(tr, {}), TraceMismatch);
  net.params()[0] += 1.0;
  EXPECT_THROW(net.backward(tr, {Matrix::Ones(1, 1)}), TraceMismatch);
}

TEST(RnnBackbone, SameInterfaceFewerParameters) {
  NetworkConfig c;
  c.input_dim = 5;
  c.hidden = {7, 4};
  c.output_dim = 3;
  const RecurrentNet ltc(c, 3);
  const RecurrentNet rnn = with_rnn_backbone(c, 3);
  EXPECT_EQ(rnn.config().cell, CellType::rnn);
  EXPECT_EQ(ltc.param_count() - rnn.param_count(), 7u + 4u);
  EXPECT_EQ(with_rnn_backbone(c, 3).params(), rnn.params());
  const auto report = testing_support::gradient_check(rnn, 10, 3, 5);
  EXPECT_LT(report.max_param_rel_error, 1e-4);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  NetworkConfig c;
  c.input_dim = 4;
  c.hidden = {5, 3};
  c.output_dim = 6;
  c.dt = 0.1;
  RecurrentNet net(c, 31);
  net.b_mut(1).setRandom();
  const auto text = dump_network(net);
  const auto back = parse_network(text);
  EXPECT_EQ(back.params(), net.params());
  EXPECT_EQ(back.config().hidden, c.hidden);
  EXPECT_EQ(back.config().dt, c.dt);
  EXPECT_EQ(dump_network(back), text);
  EXPECT_EQ(dump_network(parse_network(dump_network(with_rnn_backbone(c, 2)))),
            dump_network(with_rnn_backbone(c, 2)));
  EXPECT_THROW(parse_network("garbage"), ParseError);
}

}  // namespace
}  // namespace metadvfs

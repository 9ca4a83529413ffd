#include "metadvfs/qlearner.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "oracles.hpp"

namespace metadvfs {
namespace {

using testing_support::random_tabular_dataset;
using testing_support::value_iteration;

const auto kCatalog = load_catalog(std::filesystem::path(METADVFS_DATA_DIR) / "pixel_catalog.json");

const MetadataRecord& rec(const std::string& id) {
  for (const auto& r : kCatalog)
    if (r.id == id) return r;
  throw std::runtime_error(id);
}

Dataset dvfs_dataset(int episodes, int length, std::uint64_t seed) {
  const EnvSpec spec = generate_env(rec("pixel4"), rec("tiktok"), seed);
  DvfsEnv env(spec);
  auto inner = std::make_shared<SchedutilPolicy>(spec);
  EpsilonMixPolicy policy(inner, spec.branch_sizes(), 0.3);
  Dataset out{spec.state_dim(), spec.branch_sizes(), {}};
  for (int e = 0; e < episodes; ++e) {
    auto r = rollout(env, policy, length, derive_seed_index(seed, static_cast<std::uint64_t>(e)));
    for (auto& t : r.dataset.items) t.episode = e;
    out.items.insert(out.items.end(), r.dataset.items.begin(), r.dataset.items.end());
  }
  return out;
}

TrainConfig small_config() {
  TrainConfig c;
  c.batch_size = 8;
  c.sequence_len = 4;
  c.train_steps = 30;
  c.target_update_interval = 10;
  return c;
}

QNetConfig small_net() {
  QNetConfig n;
  n.hidden = {8};
  return n;
}

// ---------------------------------------------------------------------------

TEST(Act, EpsilonZeroIsDeterministicArgmax) {
  QNetwork q(4, {3, 5}, small_net(), 2);
  const std::vector<double> s{0.1, -0.4, 0.9, 0.0};
  Rng a(1), b(99);
  const auto r1 = act(q, q.net.zero_state(1), s, 0.0, a);
  const auto r2 = act(q, q.net.zero_state(1), s, 0.0, b);
  EXPECT_EQ(r1.action, r2.action);
  HiddenState h = q.net.zero_state(1);
  const Matrix out = q.net.step(h, q.encode(s));
  EXPECT_EQ(r1.action, q.greedy(out));
  EXPECT_EQ(r1.hidden.h[0], h.h[0]);
}

TEST(Act, EpsilonOneIsUniformPerBranch) {
  QNetwork q(2, {3, 4}, small_net(), 2);
  Rng rng(5);
  std::vector<std::vector<int>> counts{std::vector<int>(3), std::vector<int>(4)};
  const int n = 24000;
  for (int i = 0; i < n; ++i) {
    const auto r = act(q, q.net.zero_state(1), std::vector<double>{0.3, 0.2}, 1.0, rng);
    ++counts[0][static_cast<std::size_t>(r.action[0])];
    ++counts[1][static_cast<std::size_t>(r.action[1])];
  }
  for (const auto& branch : counts)
    for (int c : branch) EXPECT_NEAR(static_cast<double>(c) / n, 1.0 / branch.size(), 0.015);
}

TEST(Act, GreedyInvariantToPositiveAffineHeadTransform) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    QNetwork q(3, {4, 2, 6}, small_net(), static_cast<std::uint64_t>(trial));
    q.net.b_out_mut().setRandom();
    std::vector<double> s{std::uniform_real_distribution<double>(-1, 1)(rng), 0.5, -0.2};
    const auto base = act(q, {}, s, 0.0, rng).action;
    QNetwork scaled = q;
    scaled.net.W_out_mut() *= 3.7;
    scaled.net.b_out_mut() = scaled.net.b_out_mut() * 3.7 + Vector::Constant(q.net.b_out().size(), -1.25);
    EXPECT_EQ(act(scaled, {}, s, 0.0, rng).action, base);
  }
}

// ---------------------------------------------------------------------------

TEST(Replay, NeverExceedsCapacityAndKeepsNewest) {
  ReplayMemory m(5);
  for (int i = 0; i < 12; ++i) m.push({{double(i)}, {0}, 0.0, {0.0}, i / 4});
  EXPECT_EQ(m.size(), 5u);
  EXPECT_EQ(m.at(0).state[0], 7.0);
  EXPECT_EQ(m.at(4).state[0], 11.0);
  Rng rng(1);
  for (auto p : m.sample(100, rng)) EXPECT_LT(p, m.size());
}

TEST(Replay, WindowsNeverCrossEpisodesProperty) {
  Rng rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t cap = std::uniform_int_distribution<std::size_t>(1, 40)(rng);
    ReplayMemory m(cap);
    int episode = 0;
    const int total = std::uniform_int_distribution<int>(1, 120)(rng);
    int left = 0;
    for (int i = 0; i < total; ++i) {
      if (left == 0) {
        // adversarial lengths: many 1- and 2-step episodes
        left = std::uniform_int_distribution<int>(1, 3)(rng) == 1 ? 1
                                                                  : std::uniform_int_distribution<int>(1, 11)(rng);
        ++episode;
      }
      m.push({{double(i)}, {0}, 0.0, {0.0}, episode});
      --left;
    }
    const int len = std::uniform_int_distribution<int>(1, 9)(rng);
    for (std::size_t pos = 0; pos < m.size(); ++pos) {
      const auto w = m.window(pos, len);
      ASSERT_EQ(w.size(), static_cast<std::size_t>(len));
      EXPECT_EQ(w.back(), pos);
      for (std::size_t k = 0; k < w.size(); ++k) {
        EXPECT_EQ(m.at(w[k]).episode, m.at(pos).episode);
        if (k) EXPECT_LE(w[k - 1], w[k]);
      }
    }
  }
}

// ---------------------------------------------------------------------------

SequenceBatch one_step_batch(int dim, std::vector<std::vector<int>> actions, std::vector<double> rewards) {
  SequenceBatch b;
  const auto B = static_cast<Eigen::Index>(actions.size());
  b.states = {Matrix::Constant(dim, B, 0.3)};
  b.next_states = {Matrix::Constant(dim, B, -0.2)};
  b.actions = std::move(actions);
  b.rewards = Eigen::Map<Vector>(rewards.data(), static_cast<Eigen::Index>(rewards.size()));
  return b;
}

TEST(TdLoss, ZeroTargetsGiveZeroLossAndGradient) {
  QNetwork q(3, {2, 3}, small_net(), 4);
  q.net.W_out_mut().setZero();
  q.net.b_out_mut().setZero();
  const auto batch = one_step_batch(3, {{0, 1}, {1, 2}}, {0.0, 0.0});
  Vector grad;
  EXPECT_EQ(td_loss(q, q, batch, 0.0, &grad), 0.0);
  EXPECT_EQ(grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(TdLoss, HandComputedSingleTransition) {
  QNetwork q(2, {2, 3}, small_net(), 4);
  q.net.W_out_mut().setZero();
  q.net.b_out_mut() << 0.5, -1.0, 2.0, 0.25, 3.0;
  const auto batch = one_step_batch(2, {{1, 2}}, {0.75});
  // branch 0 picks Q=-1.0, branch 1 picks Q=3.0
  const double expect = (std::pow(-1.0 - 0.75, 2) + std::pow(3.0 - 0.75, 2)) / 2;
  EXPECT_NEAR(td_loss(q, q, batch, 0.0, nullptr), expect, 1e-12);
  // with gamma, the target adds the max of each target head
  const double g = 0.5;
  const double with_gamma = (std::pow(-1.0 - (0.75 + g * 0.5), 2) + std::pow(3.0 - (0.75 + g * 3.0), 2)) / 2;
  EXPECT_NEAR(td_loss(q, q, batch, g, nullptr), with_gamma, 1e-12);
}

TEST(TdLoss, GradientMatchesFiniteDifferences) {
  const Dataset d = dvfs_dataset(2, 20, 3);
  QNetwork q = init_qnetwork(d, small_net(), 9);
  QNetwork target(d.state_dim, d.branch_sizes, small_net(), 10);
  target.normalizer = q.normalizer;
  ReplayMemory m(d.size());
  m.push_all(d);
  const std::vector<std::size_t> pos{0, 3, 17, 25, 39};
  const auto batch = make_batch(q.normalizer, m, pos, 4);
  Vector grad;
  td_loss(q, target, batch, 0.9, &grad);
  QNetwork probe = q;
  double worst = 0;
  for (Eigen::Index i = 0; i < grad.size(); i += 7) {
    const double orig = probe.net.params()[i];
    probe.net.params()[i] = orig + 1e-6;
    const double up = td_loss(probe, target, batch, 0.9);
    probe.net.params()[i] = orig - 1e-6;
    const double down = td_loss(probe, target, batch, 0.9);
    probe.net.params()[i] = orig;
    const double fd = (up - down) / 2e-6;
    worst = std::max(worst, std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6}));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(TdLoss, NonNegativeOnRandomBatches) {
  const Dataset d = dvfs_dataset(1, 40, 4);
  QNetwork q = init_qnetwork(d, small_net(), 2);
  ReplayMemory m(d.size());
  m.push_all(d);
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    const auto batch = make_batch(q.normalizer, m, m.sample(6, rng), 3);
    EXPECT_GE(td_loss(q, q, batch, 0.95), 0.0);
  }
}

TEST(TdTrainStep, SecondLossNotAboveFirstOnFrozenBatch) {
  const Dataset d = dvfs_dataset(1, 40, 5);
  QNetwork q = init_qnetwork(d, small_net(), 3);
  ReplayMemory m(d.size());
  m.push_all(d);
  Rng rng(4);
  const auto batch = make_batch(q.normalizer, m, m.sample(16, rng), 4);
  TrainConfig c;
  c.learn_rate = 1e-4;
  Adam adam(c.learn_rate);
  QNetwork target = q;
  const double first = td_train_step(q, target, batch, c, adam);
  target = q;  // sync between the two steps
  const double second = td_loss(q, target, batch, c.discount_factor);
  const double stepped = td_train_step(q, target, batch, c, adam);
  EXPECT_EQ(second, stepped);
  EXPECT_LE(second, first);
}

// ---------------------------------------------------------------------------

TEST(TrainConfig, ValidatesRanges) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.discount_factor = 1.0;
  EXPECT_THROW(c.validate(), InvalidConfig);
  c = {};
  c.epsilon.end = 0.5;
  c.epsilon.start = 0.2;
  EXPECT_THROW(c.validate(), InvalidConfig);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), InvalidConfig);
  EXPECT_DOUBLE_EQ(TrainConfig{}.epsilon.at(0), 1.0);
  EXPECT_DOUBLE_EQ(TrainConfig{}.epsilon.at(1000), 0.525);
  EXPECT_DOUBLE_EQ(TrainConfig{}.epsilon.at(5000), 0.05);
}

TEST(TrainOnDataset, ZeroStepsReturnsInitialNetworkWithNormalizer) {
  const Dataset d = dvfs_dataset(1, 30, 6);
  TrainConfig c = small_config();
  c.train_steps = 0;
  const QNetwork q = train_on_dataset(d, c, small_net(), 11);
  const QNetwork fresh = init_qnetwork(d, small_net(), 11);
  EXPECT_EQ(q.net.params(), fresh.net.params());
  ASSERT_TRUE(q.normalizer.fitted());
  EXPECT_EQ(q.normalizer.mean, fresh.normalizer.mean);
  double mean0 = 0;
  for (const auto& t : d.items) mean0 += t.state[0] + t.next_state[0];
  EXPECT_NEAR(q.normalizer.mean[0], mean0 / (2.0 * d.size()), 1e-12);
}

TEST(TrainOnDataset, DeterministicCheckpoints) {
  const Dataset d = dvfs_dataset(2, 30, 7);
  std::vector<TrainLogRecord> log1, log2;
  const auto a = dump_qnetwork(train_on_dataset(d, small_config(), small_net(), 5, &log1));
  const auto b = dump_qnetwork(train_on_dataset(d, small_config(), small_net(), 5, &log2));
  EXPECT_EQ(a, b);
  EXPECT_EQ(dump_train_log(log1), dump_train_log(log2));
  EXPECT_NE(a, dump_qnetwork(train_on_dataset(d, small_config(), small_net(), 6)));
}

TEST(TrainOnDataset, ArityMismatchAcrossDatasets) {
  const Dataset a = dvfs_dataset(1, 10, 1);
  Dataset b = random_tabular_dataset(two_state_mdp(), 1, 10, 1);
  EXPECT_THROW(train_on_dataset({&a, &b}, small_config(), small_net(), 1), ArityMismatch);
}

TEST(TrainOnDataset, TrainingLogIsLineDelimited) {
  const Dataset d = dvfs_dataset(1, 30, 8);
  TrainConfig c = small_config();
  c.log_every = 10;
  std::vector<TrainLogRecord> log;
  train_on_dataset(d, c, small_net(), 1, &log);
  ASSERT_EQ(log.size(), 4u);  // steps 1, 10, 20, 30
  EXPECT_EQ(log.back().step, 30);
  const auto text = dump_train_log(log);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
  EXPECT_NE(text.find("\"q_mean\""), std::string::npos);
}

TrainConfig tabular_config() {
  TrainConfig c;
  c.discount_factor = 0.9;
  c.learn_rate = 1e-2;
  c.batch_size = 32;
  c.sequence_len = 2;
  c.target_update_interval = 50;
  c.train_steps = 1500;
  return c;
}

/// Greedy action of `q` on the last state of every dataset window compared
/// to the value-iteration optimum.
double policy_agreement(const QNetwork& q, const Dataset& d, const std::vector<std::vector<double>>& qstar,
                        int len) {
  ReplayMemory m(d.size());
  m.push_all(d);
  std::vector<std::size_t> all(d.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto batch = make_batch(q.normalizer, m, all, len);
  HiddenState h = q.net.zero_state(static_cast<int>(all.size()));
  Matrix out;
  for (const auto& x : batch.states) out = q.net.step(h, x);
  int agree = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const int s = testing_support::state_index(d.items[i].state);
    agree += q.greedy(out, static_cast<Eigen::Index>(i))[0] == testing_support::argmax(qstar[static_cast<std::size_t>(s)]);
  }
  return static_cast<double>(agree) / all.size();
}

TEST(TrainOnDataset, RecoversValueIterationPolicyOnTabularMdp) {
  const TabularMdp mdp = two_state_mdp();
  const auto qstar = value_iteration(mdp, 0.9);
  // the optimum is not myopic in state 0
  ASSERT_EQ(testing_support::argmax(qstar[0]), 1);
  ASSERT_GT(mdp.R[0][0], mdp.R[0][1]);
  ASSERT_EQ(testing_support::argmax(qstar[1]), 0);
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Dataset d = random_tabular_dataset(mdp, 20, 50, seed + 100);
    const QNetwork q = train_on_dataset(d, tabular_config(), small_net(), seed);
    wins += policy_agreement(q, d, qstar, 2) == 1.0;
  }
  EXPECT_GE(wins, 3);
}

// ---------------------------------------------------------------------------

TEST(Fqe, IdenticalRewardOneTransitionsWithZeroDiscount) {
  Dataset d{3, {2, 2}, {}};
  for (int i = 0; i < 50; ++i) d.items.push_back({{0.2, 0.4, 0.6}, {1, 0}, 1.0, {0.2, 0.4, 0.6}, 0});
  QNetwork q(3, {2, 2}, small_net(), 1);
  q.normalizer.fit(d);
  TrainConfig c;
  c.discount_factor = 0.0;
  const auto est = fqe_q_value(q, d, c, 4);
  EXPECT_NEAR(est.value, 1.0, 1e-6);
  EXPECT_TRUE(est.converged);
  EXPECT_EQ(est.n_states, 50);
}

/// Hand-built network whose greedy action is the optimal one for each state of
/// the two-state MDP, regardless of history.
QNetwork optimal_tabular_policy(const Dataset& d, const std::vector<std::vector<double>>& qstar) {
  QNetConfig nc;
  nc.hidden = {1};
  QNetwork q(2, {2}, nc, 0);
  q.normalizer.mean = Vector::Zero(2);
  q.normalizer.scale = Vector::Ones(2);
  (void)d;
  q.net.W_mut(0).setZero();
  q.net.b_mut(0).setZero();
  q.net.U_mut(0) << -3.0, 3.0;  // h > 0 in state 1, h < 0 in state 0
  q.net.tau_raw_mut(0)(0) = inverse_softplus(0.25 - 1e-2);  // settles within one input
  const int a0 = testing_support::argmax(qstar[0]);
  const int a1 = testing_support::argmax(qstar[1]);
  q.net.W_out_mut().setZero();
  q.net.W_out_mut()(a1, 0) += 1.0;
  q.net.W_out_mut()(a0, 0) -= 1.0;
  return q;
}

TEST(Fqe, OptimalPolicyMatchesValueIteration) {
  const TabularMdp mdp = two_state_mdp();
  const auto qstar = value_iteration(mdp, 0.9);
  const Dataset d = random_tabular_dataset(mdp, 20, 50, 7);
  const QNetwork pi = optimal_tabular_policy(d, qstar);
  ASSERT_EQ(policy_agreement(pi, d, qstar, 8), 1.0);
  TrainConfig c;
  c.discount_factor = 0.9;
  const auto est = fqe_q_value(pi, d, c, 3);
  double v = 0;
  for (const auto& t : d.items) {
    const auto& row = qstar[static_cast<std::size_t>(testing_support::state_index(t.state))];
    v += *std::max_element(row.begin(), row.end());
  }
  v /= d.size();
  EXPECT_TRUE(est.converged);
  EXPECT_NEAR(est.value, v, 0.02 * std::abs(v));
}

TEST(Fqe, InvariantToEpisodeShuffling) {
  const Dataset d = dvfs_dataset(4, 30, 9);
  const QNetwork q = train_on_dataset(d, small_config(), small_net(), 2);
  Dataset shuffled{d.state_dim, d.branch_sizes, {}};
  for (int e : {2, 0, 3, 1})
    for (const auto& t : d.items)
      if (t.episode == e) shuffled.items.push_back(t);
  const auto a = fqe_q_value(q, d, TrainConfig{}, 5);
  const auto b = fqe_q_value(q, shuffled, TrainConfig{}, 5);
  EXPECT_NEAR(a.value, b.value, 1e-9);
  EXPECT_EQ(a.n_states, b.n_states);
  EXPECT_TRUE(std::isfinite(a.value));
}

TEST(Fqe, DeterministicAndSeedKeyed) {
  const Dataset d = dvfs_dataset(2, 30, 10);
  const QNetwork q = train_on_dataset(d, small_config(), small_net(), 3);
  const auto a = fqe_q_value(q, d, TrainConfig{}, 5);
  const auto b = fqe_q_value(q, d, TrainConfig{}, 5);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.iterations, b.iterations);
  EXPECT_EQ(a.seed, 5u);
  FqeConfig initial;
  initial.average = FqeAverage::initial_states;
  EXPECT_EQ(fqe_q_value(q, d, TrainConfig{}, 5, initial).n_states, 2);
}

TEST(Fqe, IterationCapFlagsNonConvergence) {
  const Dataset d = dvfs_dataset(1, 40, 11);
  const QNetwork q = train_on_dataset(d, small_config(), small_net(), 3);
  FqeConfig capped;
  capped.max_iterations = 2;
  const auto est = fqe_q_value(q, d, TrainConfig{}, 5, capped);
  EXPECT_FALSE(est.converged);
  EXPECT_EQ(est.iterations, 2);
  EXPECT_TRUE(std::isfinite(est.value));
}

// ---------------------------------------------------------------------------

TEST(QCheckpoint, RoundTripIsBitExact) {
  const Dataset d = dvfs_dataset(1, 20, 12);
  const QNetwork q = train_on_dataset(d, small_config(), small_net(), 4);
  const auto text = dump_qnetwork(q);
  const QNetwork back = parse_qnetwork(text);
  EXPECT_EQ(back.net.params(), q.net.params());
  EXPECT_EQ(back.normalizer.mean, q.normalizer.mean);
  EXPECT_EQ(back.normalizer.scale, q.normalizer.scale);
  EXPECT_EQ(back.offsets, q.offsets);
  EXPECT_EQ(dump_qnetwork(back), text);
  EXPECT_THROW(parse_qnetwork("metadvfs-net 1\n"), ParseError);
}

TEST(TrainOnline, RunsAndLogsEpsilonSchedule) {
  TabularEnv env(two_state_mdp());
  TrainConfig c = tabular_config();
  c.train_steps = 200;
  c.log_every = 50;
  c.epsilon.decay_steps = 100;
  std::vector<TrainLogRecord> log;
  const QNetwork q = train_online(env, c, small_net(), 25, 3, &log);
  ASSERT_EQ(log.size(), 4u);
  EXPECT_DOUBLE_EQ(log[0].epsilon, c.epsilon.at(50));
  EXPECT_DOUBLE_EQ(log[3].epsilon, c.epsilon.end);
  EXPECT_TRUE(q.normalizer.fitted());
}

}  // namespace
}  // namespace metadvfs

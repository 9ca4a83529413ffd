#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "metadvfs/dataset.hpp"
#include "metadvfs/ltc.hpp"
#include "metadvfs/optim.hpp"
#include "metadvfs/simenv.hpp"

namespace metadvfs {

/// Per-feature affine normalization fitted on recorded states.
struct StateNormalizer {
  Vector mean;
  Vector scale;

  bool fitted() const { return mean.size() > 0; }
  /// Mean and standard deviation over every state and next_state; constant
  /// features get scale 1.
  void fit(const Dataset& data);
  void apply(std::span<const double> raw, double* out) const;
};

struct QNetConfig {
  std::vector<int> hidden = {16};
  CellType cell = CellType::ltc;
  int steps_per_input = 4;
  double dt = 0.25;
};

/// Recurrent backbone whose readout is the concatenation of one linear head
/// per action branch.
class QNetwork {
 public:
  QNetwork() = default;
  QNetwork(int state_dim, std::vector<int> branch_sizes, const QNetConfig& config,
           std::uint64_t seed);

  int state_dim() const { return net.config().input_dim; }
  const std::vector<int>& branch_sizes() const { return branches; }
  int branch_count() const { return static_cast<int>(branches.size()); }
  int head_offset(int branch) const { return offsets[static_cast<std::size_t>(branch)]; }

  /// Normalized column for one raw state.
  Matrix encode(std::span<const double> raw) const;
  /// Per-branch argmax of column `col` of a readout matrix.
  std::vector<int> greedy(const Matrix& q, Eigen::Index col = 0) const;

  RecurrentNet net;
  std::vector<int> branches;
  std::vector<int> offsets;
  StateNormalizer normalizer;
};

struct EpsilonSchedule {
  double start = 1.0;
  double end = 0.05;
  int decay_steps = 2000;
  /// Linear decay from start to end, then constant.
  double at(long step) const;
};

struct TrainConfig {
  double discount_factor = 0.95;
  double learn_rate = 1e-3;
  int batch_size = 32;
  int sequence_len = 8;
  int target_update_interval = 200;
  EpsilonSchedule epsilon;
  int train_steps = 5000;
  double grad_clip = 10.0;  // global norm, <= 0 disables
  int log_every = 100;

  /// Throws InvalidConfig unless every field is in range.
  void validate() const;
};

struct ActResult {
  std::vector<int> action;
  HiddenState hidden;
};

/// Advances `hidden` by one input and picks per-branch levels: uniform with
/// probability epsilon on each branch, otherwise that branch's argmax.
ActResult act(const QNetwork& q, const HiddenState& hidden, std::span<const double> state,
              double epsilon, Rng& rng);

/// Ring buffer of transitions in insertion order.
class ReplayMemory {
 public:
  explicit ReplayMemory(std::size_t capacity);

  void push(Transition t);
  void push_all(const Dataset& d);
  std::size_t size() const { return size_; }
  std::size_t capacity() const { return items_.size(); }
  /// Logical position 0 is the oldest stored transition.
  const Transition& at(std::size_t pos) const;

  /// `len` logical positions ending at `pos`. Positions before the start of
  /// pos's episode (or before the oldest stored item) are replaced by the
  /// first one available, so a window never spans two episodes.
  std::vector<std::size_t> window(std::size_t pos, int len) const;

  std::vector<std::size_t> sample(int count, Rng& rng) const;

 private:
  std::vector<Transition> items_;
  std::size_t head_ = 0;  // slot of the oldest item
  std::size_t size_ = 0;
};

/// Normalized sequence windows for a TD update. states[k] and next_states[k]
/// are (state_dim x batch); the last entry holds s_t and s_{t+1}.
struct SequenceBatch {
  std::vector<Matrix> states;
  std::vector<Matrix> next_states;
  std::vector<std::vector<int>> actions;  // [batch][branch]
  Vector rewards;
};

SequenceBatch make_batch(const StateNormalizer& norm, const ReplayMemory& memory,
                         std::span<const std::size_t> positions, int sequence_len);

/// Mean over batch and branches of (Q_j(s, a_j) - r - gamma max_a Q'_j(s', a))^2.
/// Fills `grad` with the parameter gradient when non-null.
double td_loss(const QNetwork& q, const QNetwork& target, const SequenceBatch& batch,
               double gamma, Vector* grad = nullptr);

/// One optimizer step on `q`; returns the loss before the step.
double td_train_step(QNetwork& q, const QNetwork& target, const SequenceBatch& batch,
                     const TrainConfig& config, Adam& optimizer);

struct TrainLogRecord {
  long step = 0;
  double loss = 0;
  double epsilon = 0;
  double q_mean = 0;
};
std::string dump_train_log(const std::vector<TrainLogRecord>& log);

/// Offline DQN over a fixed replay memory. Owns its networks and RNG.
class Trainer {
 public:
  Trainer(QNetwork init, const Dataset& data, TrainConfig config, std::uint64_t seed);

  /// One sampled TD update (with target refresh on schedule); returns the loss.
  double step();
  void run(int steps);

  long steps_done() const { return steps_; }
  const QNetwork& network() const { return q_; }
  const std::vector<TrainLogRecord>& log() const { return log_; }

 private:
  QNetwork q_, target_;
  ReplayMemory memory_;
  TrainConfig config_;
  Adam adam_;
  Rng rng_;
  long steps_ = 0;
  std::vector<TrainLogRecord> log_;
};

/// Fresh network with the normalizer fitted on `data`.
QNetwork init_qnetwork(const Dataset& data, const QNetConfig& net_config, std::uint64_t seed);

/// Offline training on the union of `datasets`. Throws ArityMismatch when
/// their shapes differ.
QNetwork train_on_dataset(const std::vector<const Dataset*>& datasets, const TrainConfig& config,
                          const QNetConfig& net_config, std::uint64_t seed,
                          std::vector<TrainLogRecord>* log = nullptr);
QNetwork train_on_dataset(const Dataset& dataset, const TrainConfig& config,
                          const QNetConfig& net_config, std::uint64_t seed,
                          std::vector<TrainLogRecord>* log = nullptr);

/// Online variant: acts in `env` with the epsilon schedule and trains from its
/// own replay memory. Episodes last `episode_len` steps.
QNetwork train_online(Environment& env, const TrainConfig& config, const QNetConfig& net_config,
                      int episode_len, std::uint64_t seed,
                      std::vector<TrainLogRecord>* log = nullptr);

/// Greedy (or epsilon-greedy) controller around a shared network.
class QPolicy final : public Policy {
 public:
  explicit QPolicy(QNetwork q, double epsilon = 0.0) : q_(std::move(q)), epsilon_(epsilon) {}
  void reset() override { hidden_ = q_.net.zero_state(1); }
  std::vector<int> act(std::span<const double> state, Rng& rng) override;

 private:
  QNetwork q_;
  double epsilon_;
  HiddenState hidden_;
};

enum class FqeAverage { all_states, initial_states };

struct FqeConfig {
  int max_iterations = 400;
  double tolerance = 1e-3;
  double ridge = 1e-9;  // shared weights, scaled by the number of transitions
  double level_ridge = 1e-2;  // action-dependent weights; unseen actions fall back to the shared fit
  int level_degree = 2;       // per-branch polynomial degree in the level position
  bool pairwise = true;       // products of level positions across branches
  int reservoir_width = 16;  // 0 drops the reservoir features
  FqeAverage average = FqeAverage::all_states;
};

struct QEstimate {
  double value = 0;
  int n_states = 0;
  std::uint64_t seed = 0;
  bool converged = false;
  int iterations = 0;
  double residual = 0;
};

/// Fitted Q evaluation of the greedy policy of `policy` on `data`.
///
/// Q(s, a) over the joint branched action is a ridge regression on the
/// product of state features and an action basis. State features of a
/// sequence window are [1, normalized last state, final hidden state of a
/// fixed random recurrent reservoir seeded from `seed`]. The action basis holds
/// powers of each branch's level position level/(K-1) and their pairwise
/// products. The fit is repeated on Bellman targets r + gamma Q(s', pi(s')),
/// clipped to [min r, max r] / (1 - gamma), until the RMS change of the
/// fitted values drops below the tolerance. The estimate averages Q(s, pi(s))
/// over the evaluation states. Non-convergence is reported in the result,
/// which then holds the iterate with the smallest change.
QEstimate fqe_q_value(const QNetwork& policy, const Dataset& data, const TrainConfig& config,
                      std::uint64_t seed, const FqeConfig& fqe = {});

std::string dump_qnetwork(const QNetwork& q);
QNetwork parse_qnetwork(const std::string& text);

}  // namespace metadvfs

#pragma once

#include <vector>

#include "metadvfs/simenv.hpp"

namespace metadvfs {

/// Finite MDP with a single action branch. P[s][a][s'] and R[s][a].
struct TabularMdp {
  int states = 0;
  int actions = 0;
  std::vector<std::vector<std::vector<double>>> P;
  std::vector<std::vector<double>> R;
};

/// Two states, two actions, action a moves to state a. Greedy on immediate
/// reward picks action 0 in state 0, the discounted optimum does not.
TabularMdp two_state_mdp();

/// Exposes a TabularMdp through the learner interface: the observation is the
/// one-hot state, the action is one branch of `actions` levels.
class TabularEnv final : public Environment {
 public:
  explicit TabularEnv(TabularMdp mdp) : mdp_(std::move(mdp)) {}

  int state_dim() const override { return mdp_.states; }
  std::vector<int> branch_sizes() const override { return {mdp_.actions}; }
  std::vector<double> reset(std::uint64_t seed) override;
  StepOutcome step(std::span<const int> branches) override;
  std::vector<double> observe() const override;

  int current() const { return state_; }

 private:
  TabularMdp mdp_;
  Rng rng_;
  int state_ = 0;
};

}  // namespace metadvfs

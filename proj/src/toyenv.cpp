#include "metadvfs/toyenv.hpp"

namespace metadvfs {

TabularMdp two_state_mdp() {
  TabularMdp m;
  m.states = 2;
  m.actions = 2;
  m.P = {{{1, 0}, {0, 1}}, {{1, 0}, {0, 1}}};
  m.R = {{0.5, 0.0}, {2.0, 0.3}};
  return m;
}

std::vector<double> TabularEnv::reset(std::uint64_t seed) {
  rng_.seed(seed);
  state_ = std::uniform_int_distribution<int>(0, mdp_.states - 1)(rng_);
  return observe();
}

std::vector<double> TabularEnv::observe() const {
  std::vector<double> v(static_cast<std::size_t>(mdp_.states), 0.0);
  v[static_cast<std::size_t>(state_)] = 1.0;
  return v;
}

StepOutcome TabularEnv::step(std::span<const int> branches) {
  if (branches.size() != 1 || branches[0] < 0 || branches[0] >= mdp_.actions)
    throw ArityMismatch("tabular environment takes one action in range");
  const auto s = static_cast<std::size_t>(state_);
  const auto a = static_cast<std::size_t>(branches[0]);
  StepOutcome out;
  out.reward = mdp_.R[s][a];
  std::discrete_distribution<int> next(mdp_.P[s][a].begin(), mdp_.P[s][a].end());
  state_ = next(rng_);
  out.perf = out.reward;
  return out;
}

}  // namespace metadvfs

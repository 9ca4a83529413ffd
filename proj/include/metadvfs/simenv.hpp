#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "metadvfs/common.hpp"
#include "metadvfs/dataset.hpp"
#include "metadvfs/metadata.hpp"

namespace metadvfs {

/// One frequency domain (a CPU cluster or the GPU).
///
/// Frequencies are in MHz. Capacity is in work units per millisecond:
///   capacity(f) = capacity_coeff * core_count * f[GHz] * process_efficiency
/// Power is in milliwatts:
///   power(f, u) = power_coeff * u * f[GHz]^3 + static_power_mw
struct FreqDomain {
  int core_count = 1;
  std::vector<double> freq_levels;
  double capacity_coeff = 1;
  double power_coeff = 1;
  double static_power_mw = 1;
  /// Fraction of the frame's work of this kind placed on this domain.
  double work_share = 1;
};

enum class Category { video, interactive, graphics };

Category parse_category(const std::string& token);
std::string to_string(Category c);

/// Two-regime (idle/burst) multiplicative demand generator. Stationary
/// profiles set the switching probabilities to zero.
struct DemandProcess {
  double mean_work = 0;      // work units per frame
  double noise = 0.1;        // relative stddev per step
  double burst_multiplier = 1;
  double idle_multiplier = 1;
  double p_enter_burst = 0;  // idle -> burst per step
  double p_exit_burst = 0;   // burst -> idle per step
  double drift = 0;          // AR(1) scene-complexity coefficient, graphics only
};

struct WorkloadProfile {
  Category category = Category::video;
  /// Frames per second; 0 means "variable".
  double target_fps = 60;
  DemandProcess cpu_demand;
  DemandProcess gpu_demand;
  /// Milliseconds of frequency-independent time per unit of CPU work.
  double io_weight = 0;
  double base_ipc = 1;

  bool variable_target() const { return target_fps <= 0; }
};

struct RewardConfig {
  double power_weight = 0;  // lambda; 0 means 1 / P_max(env)
  double quality_weight = 1.0;
  double latency_weight = 0.5;
  double latency_target_ms = 0;  // 0 means 1000 / target (100 ms if variable)
  double quality_ema = 0.3;      // interactive quality smoothing
};

struct EnvSpec {
  CombinationKey combination;
  std::vector<FreqDomain> cpu_clusters;
  FreqDomain gpu;
  double process_efficiency = 1;
  WorkloadProfile workload;
  RewardConfig reward;
  std::uint64_t seed = 0;

  /// Display refresh cap used when the target is variable.
  static constexpr double kRefreshCapFps = 120;

  int cluster_count() const { return static_cast<int>(cpu_clusters.size()); }
  std::vector<int> branch_sizes() const;
  int state_dim() const { return 2 * cluster_count() + 4; }

  double capacity(const FreqDomain& d, double freq_mhz) const;
  static double power(const FreqDomain& d, double freq_mhz, double util);
  double static_power_total() const;
  double max_power() const;
  double frame_cap_fps() const;
  double latency_target_ms() const;
  double power_weight() const;
  /// Achieved fps at maximum frequencies under mean demand.
  double max_fps() const;
};

struct EnvState {
  double ipc = 0;
  std::vector<double> cpu_util;
  std::vector<double> cpu_freq;
  double gpu_util = 0;
  double gpu_freq = 0;
  double power_mw = 0;

  /// Column order: ipc, cpu_util[0..n), cpu_freq[0..n), gpu_util, gpu_freq, power_mw.
  std::vector<double> to_vector() const;
  static EnvState from_vector(std::span<const double> v, int clusters);
};

struct Action {
  std::vector<int> cluster_freq_idx;
  int gpu_freq_idx = 0;

  std::vector<int> to_branches() const;
  static Action from_branches(std::span<const int> b);
};

/// Work drawn for one interval.
struct Demand {
  double cpu_work = 0;
  double gpu_work = 0;
};

struct StepOutcome {
  EnvState next_state;
  double reward = 0;
  double perf = 0;  // fps, or 1000 / latency_ms for interactive apps
  double fps = 0;
  double power_mw = 0;
  double latency_ms = 0;
  double quality = 0;
  Demand demand;
};

/// Generic discrete-branch environment seen by learners and rollouts.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual int state_dim() const = 0;
  virtual std::vector<int> branch_sizes() const = 0;
  virtual std::vector<double> reset(std::uint64_t seed) = 0;
  virtual StepOutcome step(std::span<const int> branches) = 0;
  virtual std::vector<double> observe() const = 0;
};

/// Builds the environment for one device-application combination. Pure
/// function of the two records and the seed.
EnvSpec generate_env(const MetadataRecord& device, const MetadataRecord& app,
                     std::uint64_t seed, const RewardConfig& reward = {});

/// Deterministic part of a step: given the chosen frequencies and the drawn
/// demand, compute timing, utilization, power and reward. `quality_state`
/// carries the interactive EMA between steps.
StepOutcome evaluate_interval(const EnvSpec& spec, const Action& action,
                              const Demand& demand, double ipc_noise,
                              double& quality_state);

/// Single-owner mutable simulator for one EnvSpec.
class DvfsEnv final : public Environment {
 public:
  explicit DvfsEnv(EnvSpec spec);

  int state_dim() const override { return spec_.state_dim(); }
  std::vector<int> branch_sizes() const override { return spec_.branch_sizes(); }
  std::vector<double> reset(std::uint64_t seed) override;
  StepOutcome step(std::span<const int> branches) override;
  std::vector<double> observe() const override { return state_.to_vector(); }

  StepOutcome step(const Action& action);
  /// Step with an explicit demand, bypassing the generator.
  StepOutcome step_with_demand(const Action& action, const Demand& demand);

  const EnvSpec& spec() const { return spec_; }
  const EnvState& state() const { return state_; }

 private:
  Demand draw_demand();

  EnvSpec spec_;
  EnvState state_;
  Rng rng_;
  bool cpu_burst_ = false;
  bool gpu_burst_ = false;
  double scene_ = 1.0;
  double quality_state_ = 1.0;
};

/// Stateful policy over raw state vectors.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual void reset() {}
  virtual std::vector<int> act(std::span<const double> state, Rng& rng) = 0;
};

enum class GpuGovernor { schedutil_rule, fixed_mid, ladder };

struct SchedutilConfig {
  double headroom = 1.25;
  GpuGovernor gpu = GpuGovernor::schedutil_rule;
};

/// Lowest level f with f >= headroom * util * f_current, else the top level.
int schedutil_level(std::span<const double> levels, double util, double current_mhz,
                    double headroom);

Action schedutil_policy(const EnvSpec& spec, const EnvState& state,
                        const SchedutilConfig& config = {});

class SchedutilPolicy final : public Policy {
 public:
  explicit SchedutilPolicy(EnvSpec spec, SchedutilConfig config = {})
      : spec_(std::move(spec)), config_(config) {}
  std::vector<int> act(std::span<const double> state, Rng& rng) override;

 private:
  EnvSpec spec_;
  SchedutilConfig config_;
};

/// With probability `epsilon` per branch, replaces the inner policy's level
/// with a uniform one.
class EpsilonMixPolicy final : public Policy {
 public:
  EpsilonMixPolicy(std::shared_ptr<Policy> inner, std::vector<int> branch_sizes,
                   double epsilon)
      : inner_(std::move(inner)), sizes_(std::move(branch_sizes)), epsilon_(epsilon) {}
  void reset() override { inner_->reset(); }
  std::vector<int> act(std::span<const double> state, Rng& rng) override;

 private:
  std::shared_ptr<Policy> inner_;
  std::vector<int> sizes_;
  double epsilon_;
};

/// Always the top level on every branch.
class MaxFrequencyPolicy final : public Policy {
 public:
  explicit MaxFrequencyPolicy(std::vector<int> sizes) : sizes_(std::move(sizes)) {}
  std::vector<int> act(std::span<const double>, Rng&) override;

 private:
  std::vector<int> sizes_;
};

struct RolloutResult {
  Dataset dataset;
  std::vector<StepOutcome> outcomes;
};

/// Runs `horizon` steps as a single episode. Deterministic for
/// (env, policy, horizon, seed).
RolloutResult rollout(Environment& env, Policy& policy, int horizon, std::uint64_t seed);

struct CollectConfig {
  int episodes = 1;
  int horizon = 1000;
  double epsilon = 0.3;  // per-branch uniform exploration mixed into schedutil
  SchedutilConfig governor;
};

/// Behaviour data for one environment: `episodes` rollouts of an
/// epsilon-mixed schedutil governor, episode ids 0..episodes-1.
Dataset collect_dataset(const EnvSpec& spec, const CollectConfig& config, std::uint64_t seed);

std::string dump_env_spec(const EnvSpec& spec);
EnvSpec parse_env_spec(const std::string& text);

}  // namespace metadvfs

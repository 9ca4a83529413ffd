#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "metadvfs/maml.hpp"
#include "metadvfs/qlearner.hpp"
#include "metadvfs/simenv.hpp"
#include "metadvfs/taskforest.hpp"

namespace metadvfs {

/// QoE = attainment * mean per-step quality + smoothness * (1 - min(1, cv(fps)))
///     + latency * fraction of steps meeting the latency target.
/// Weights sum to 1, so QoE lies in [0, 1].
struct QoeWeights {
  double attainment = 0;
  double smoothness = 0;
  double latency = 0;
};
QoeWeights qoe_weights(Category c);

struct EpisodeMetrics {
  double mean_perf = 0;  // fps, or 1000 / latency_ms for interactive apps
  double mean_power_mw = 0;
  double ppw = 0;
  double qoe = 0;
  double mean_reward = 0;
  int length = 0;
  std::uint64_t seed = 0;
};

EpisodeMetrics episode_metrics(const EnvSpec& spec, std::span<const StepOutcome> steps,
                               std::uint64_t seed);

struct MetricsSummary {
  std::vector<EpisodeMetrics> episodes;
  double ppw_mean = 0, ppw_sd = 0;
  double qoe_mean = 0, qoe_sd = 0;
  double reward_mean = 0, reward_sd = 0;
};

/// One seeded rollout of `horizon` steps per seed. Throws InvalidConfig when
/// `seeds` is empty.
MetricsSummary evaluate_policy(const EnvSpec& spec, Policy& policy, int horizon,
                               std::span<const std::uint64_t> seeds);

/// Evaluation seeds shared by every method on one combination.
std::vector<std::uint64_t> eval_seeds(std::uint64_t root, const CombinationKey& key, int count);

struct NormalizedResult {
  std::string method;
  std::string device_id;
  std::string app_id;
  double norm_ppw = 0;
  double norm_qoe = 0;
  double ppw = 0;
  double qoe = 0;
};

/// Ratios of `m` to the baseline's means.
NormalizedResult normalize(const std::string& method, const CombinationKey& key,
                           const MetricsSummary& m, const MetricsSummary& baseline);

struct EvalProtocol {
  int horizon = 500;
  int episodes = 3;
  std::uint64_t seed = 0;
  int workers = 1;
};

/// Policy of a method on one environment; null means the artifact is missing.
using PolicyFactory = std::function<std::shared_ptr<Policy>(const EnvSpec& spec)>;

/// Every method on every environment against schedutil, on identical seeds.
/// Rows are ordered by method (as given), then by environment. Throws
/// MissingArtifact naming the method and combination.
std::vector<NormalizedResult> compare_methods(const std::vector<EnvSpec>& envs,
                                              const std::vector<std::pair<std::string, PolicyFactory>>& methods,
                                              const EvalProtocol& protocol);

/// Rows of one device (one column per app) and of one app (one column per device).
std::vector<NormalizedResult> same_device(const std::vector<NormalizedResult>& rows, const std::string& device);
std::vector<NormalizedResult> same_app(const std::vector<NormalizedResult>& rows, const std::string& app);
/// Per-method means over every row.
std::vector<NormalizedResult> cross_summary(const std::vector<NormalizedResult>& rows);

enum class Strategy { standalone, task_specific, global };
std::string to_string(Strategy s);

struct EffectivenessCell {
  std::string device_id;
  std::string app_id;
  Strategy strategy = Strategy::standalone;
  double fqe_q = 0;
  double improvement_pct = 0;  // vs standalone
};

/// improvement of `q` over `base` in percent of |base|.
double improvement_pct(double q, double base);

/// Per input combination, FQE Q on its own data of the policy trained on the
/// combination alone, on its forest root's members, and on every input with
/// the same data shape. Ordered by input, then strategy.
std::vector<EffectivenessCell> effectiveness_analysis(QEvaluator& eval, const TaskForest& forest);

struct AdaptationRun {
  std::string combination;
  std::string task_id;
  double reference = 0;   // evaluation reward of the long-trained reference
  double threshold = 0;
  int steps_meta = -1;    // -1: did not converge
  int steps_baseline = -1;
  double speedup = 0;     // steps_baseline / max(steps_meta, 1); 0 unless both converged
};

struct AdaptationConfig {
  TrainConfig train;     // shared by both arms and the reference
  QNetConfig net;
  int reference_steps = 3000;
  int max_steps = 1500;
  int eval_every = 50;
  double fraction = 0.95;  // of the reference return
  int patience = 200;      // steps the return must stay at or above the threshold
  EvalProtocol eval;
};

struct AdaptationSummary {
  std::vector<AdaptationRun> runs;
  int non_converged = 0;  // runs with either arm not converged
  double meta_mean = 0, meta_sd = 0, meta_median = 0;
  double baseline_mean = 0, baseline_sd = 0, baseline_median = 0;
  double median_ratio = 0;  // median(steps_meta) / median(steps_baseline)
};

/// First checkpoint step from which every checkpoint over the next
/// `patience` steps is at or above `threshold`; -1 if none.
int steps_to_threshold(const std::vector<std::pair<int, double>>& curve, double threshold, int patience);

/// Threshold `fraction` of the way from zero towards `reference`, measured so
/// that a negative reference still gives a value at or below it.
double return_threshold(double reference, double fraction);

/// Paired runs per new combination: training from the selected meta-model
/// (normalizer refitted on the support) against training from scratch, with
/// identical replay seeds, until the evaluation reward reaches the threshold.
AdaptationSummary adaptation_time_study(const std::vector<EnvSpec>& new_envs,
                                        const std::vector<Dataset>& supports,
                                        const TaskForest& forest,
                                        const std::map<std::string, MetaModel>& meta_models,
                                        const AdaptationConfig& config);

struct SweepPoint {
  int tau = 0;
  double fqe_q = 0;          // mean task-specific FQE Q over combinations
  double norm_fqe_q = 0;     // divided by the best point
  int definition_evaluations = 0;
  double definition_time_norm = 0;  // divided by the largest count
  std::vector<double> per_combination;
  std::size_t roots = 0;
};

/// Builds a forest per tau on a shared evaluator and reports task-specific Q.
/// Definition time counts the node trainings each build requests.
std::vector<SweepPoint> tau_sweep(QEvaluator& eval, const std::vector<int>& tau_values,
                                  ForestConfig config);

// ---------------------------------------------------------------------------
// reports

std::string comparison_csv(const std::vector<NormalizedResult>& rows);
std::string effectiveness_csv(const std::vector<EffectivenessCell>& cells);
std::string adaptation_csv(const AdaptationSummary& s);
std::string sweep_csv(const std::vector<SweepPoint>& points);

/// Named seeds a report was produced with, as a JSON document.
struct SeedManifest {
  std::map<std::string, std::uint64_t> seeds;
  std::string dump() const;
};

/// Report header: QoE weights per category and reference figures.
std::string report_header();

}  // namespace metadvfs

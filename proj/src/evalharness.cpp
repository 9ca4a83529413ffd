#include "metadvfs/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace metadvfs {

QoeWeights qoe_weights(Category c) {
  switch (c) {
    case Category::video: return {0.6, 0.3, 0.1};
    case Category::interactive: return {0.3, 0.1, 0.6};
    case Category::graphics: return {0.5, 0.4, 0.1};
  }
  return {};
}

namespace {

std::pair<double, double> mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {0, 0};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string num(double v) {
  std::ostringstream out;
  out << std::setprecision(10) << v;
  return out.str();
}

}  // namespace

EpisodeMetrics episode_metrics(const EnvSpec& spec, std::span<const StepOutcome> steps,
                               std::uint64_t seed) {
  EpisodeMetrics m;
  m.seed = seed;
  m.length = static_cast<int>(steps.size());
  if (steps.empty()) return m;
  const double n = static_cast<double>(steps.size());
  const double l_star = spec.latency_target_ms();
  double quality = 0, on_time = 0;
  std::vector<double> fps;
  for (const auto& s : steps) {
    m.mean_perf += s.perf;
    m.mean_power_mw += s.power_mw;
    m.mean_reward += s.reward;
    quality += s.quality;
    on_time += s.latency_ms <= l_star ? 1 : 0;
    fps.push_back(s.fps);
  }
  m.mean_perf /= n;
  m.mean_power_mw /= n;
  m.mean_reward /= n;
  m.ppw = m.mean_power_mw > 0 ? m.mean_perf / m.mean_power_mw : 0;
  const double fps_mean = std::accumulate(fps.begin(), fps.end(), 0.0) / n;
  double var = 0;
  for (double f : fps) var += (f - fps_mean) * (f - fps_mean) / n;
  const double fps_sd = std::sqrt(var);
  const double smooth = fps_mean > 0 ? 1 - std::min(1.0, fps_sd / fps_mean) : 0;
  const QoeWeights w = qoe_weights(spec.workload.category);
  m.qoe = w.attainment * std::clamp(quality / n, 0.0, 1.0) + w.smoothness * smooth + w.latency * on_time / n;
  return m;
}

MetricsSummary evaluate_policy(const EnvSpec& spec, Policy& policy, int horizon,
                               std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw InvalidConfig("evaluation needs at least one seed");
  DvfsEnv env(spec);
  MetricsSummary out;
  std::vector<double> ppw, qoe, reward;
  for (std::uint64_t s : seeds) {
    const RolloutResult r = rollout(env, policy, horizon, s);
    out.episodes.push_back(episode_metrics(spec, r.outcomes, s));
    ppw.push_back(out.episodes.back().ppw);
    qoe.push_back(out.episodes.back().qoe);
    reward.push_back(out.episodes.back().mean_reward);
  }
  std::tie(out.ppw_mean, out.ppw_sd) = mean_sd(ppw);
  std::tie(out.qoe_mean, out.qoe_sd) = mean_sd(qoe);
  std::tie(out.reward_mean, out.reward_sd) = mean_sd(reward);
  return out;
}

std::vector<std::uint64_t> eval_seeds(std::uint64_t root, const CombinationKey& key, int count) {
  std::vector<std::uint64_t> out;
  const std::uint64_t base = derive_seed(root, "eval." + key.name());
  for (int i = 0; i < count; ++i) out.push_back(derive_seed_index(base, static_cast<std::uint64_t>(i)));
  return out;
}

NormalizedResult normalize(const std::string& method, const CombinationKey& key,
                           const MetricsSummary& m, const MetricsSummary& baseline) {
  NormalizedResult r;
  r.method = method;
  r.device_id = key.device_id;
  r.app_id = key.app_id;
  r.ppw = m.ppw_mean;
  r.qoe = m.qoe_mean;
  r.norm_ppw = m.ppw_mean / baseline.ppw_mean;
  r.norm_qoe = m.qoe_mean / baseline.qoe_mean;
  return r;
}

std::vector<NormalizedResult> compare_methods(const std::vector<EnvSpec>& envs,
                                              const std::vector<std::pair<std::string, PolicyFactory>>& methods,
                                              const EvalProtocol& protocol) {
  const std::size_t ne = envs.size(), nm = methods.size();
  std::vector<MetricsSummary> base(ne);
  parallel_for(ne, protocol.workers, [&](std::size_t e) {
    SchedutilPolicy p(envs[e]);
    const auto seeds = eval_seeds(protocol.seed, envs[e].combination, protocol.episodes);
    base[e] = evaluate_policy(envs[e], p, protocol.horizon, seeds);
  });
  std::vector<NormalizedResult> rows(ne * nm);
  parallel_for(ne * nm, protocol.workers, [&](std::size_t cell) {
    const std::size_t m = cell / ne, e = cell % ne;
    const auto& [name, factory] = methods[m];
    std::shared_ptr<Policy> policy = factory ? factory(envs[e]) : nullptr;
    if (!policy) throw MissingArtifact("no policy for method " + name + " on " + envs[e].combination.name());
    const auto seeds = eval_seeds(protocol.seed, envs[e].combination, protocol.episodes);
    rows[cell] = normalize(name, envs[e].combination, evaluate_policy(envs[e], *policy, protocol.horizon, seeds), base[e]);
  });
  return rows;
}

std::vector<NormalizedResult> same_device(const std::vector<NormalizedResult>& rows, const std::string& device) {
  std::vector<NormalizedResult> out;
  std::copy_if(rows.begin(), rows.end(), std::back_inserter(out), [&](const auto& r) { return r.device_id == device; });
  return out;
}

std::vector<NormalizedResult> same_app(const std::vector<NormalizedResult>& rows, const std::string& app) {
  std::vector<NormalizedResult> out;
  std::copy_if(rows.begin(), rows.end(), std::back_inserter(out), [&](const auto& r) { return r.app_id == app; });
  return out;
}

std::vector<NormalizedResult> cross_summary(const std::vector<NormalizedResult>& rows) {
  std::vector<NormalizedResult> out;
  std::vector<int> counts;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& o) { return o.method == r.method; });
    if (it == out.end()) {
      out.push_back({r.method, "*", "*", 0, 0, 0, 0});
      counts.push_back(0);
      it = out.end() - 1;
    }
    it->norm_ppw += r.norm_ppw;
    it->norm_qoe += r.norm_qoe;
    it->ppw += r.ppw;
    it->qoe += r.qoe;
    ++counts[static_cast<std::size_t>(it - out.begin())];
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double c = counts[i];
    out[i].norm_ppw /= c;
    out[i].norm_qoe /= c;
    out[i].ppw /= c;
    out[i].qoe /= c;
  }
  return out;
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::standalone: return "standalone";
    case Strategy::task_specific: return "task_specific";
    case Strategy::global: return "global";
  }
  return "?";
}

double improvement_pct(double q, double base) {
  if (q == base) return 0;
  return 100.0 * (q - base) / std::abs(base);
}

namespace {

double member_q(QEvaluator& eval, const std::vector<int>& members, int i) {
  const NodeEvaluation& ne = eval.evaluate(members);
  std::vector<int> sorted = members;
  std::sort(sorted.begin(), sorted.end());
  const auto pos = std::lower_bound(sorted.begin(), sorted.end(), i) - sorted.begin();
  return ne.member_q.at(static_cast<std::size_t>(pos));
}

int root_of(const TaskForest& f, int input) {
  for (int r : f.roots) {
    const auto& m = f.node(r).members;
    if (std::find(m.begin(), m.end(), input) != m.end()) return r;
  }
  throw InvalidConfig("input " + std::to_string(input) + " is in no root");
}

}  // namespace

std::vector<EffectivenessCell> effectiveness_analysis(QEvaluator& eval, const TaskForest& forest) {
  const int n = static_cast<int>(eval.inputs().size());
  std::map<std::string, std::vector<int>> groups;
  for (int i = 0; i < n; ++i) groups[eval.inputs()[static_cast<std::size_t>(i)].data.shape_signature()].push_back(i);
  std::vector<std::vector<int>> sets;
  for (int i = 0; i < n; ++i) sets.push_back({i});
  for (int r : forest.roots) sets.push_back(forest.node(r).members);
  for (const auto& [sig, g] : groups) sets.push_back(g);
  eval.evaluate_all(sets);

  std::vector<EffectivenessCell> out;
  for (int i = 0; i < n; ++i) {
    const auto& key = eval.inputs()[static_cast<std::size_t>(i)].key;
    const double standalone = member_q(eval, {i}, i);
    const double task = member_q(eval, forest.node(root_of(forest, i)).members, i);
    const double global = member_q(eval, groups.at(eval.inputs()[static_cast<std::size_t>(i)].data.shape_signature()), i);
    out.push_back({key.device_id, key.app_id, Strategy::standalone, standalone, 0.0});
    out.push_back({key.device_id, key.app_id, Strategy::task_specific, task, improvement_pct(task, standalone)});
    out.push_back({key.device_id, key.app_id, Strategy::global, global, improvement_pct(global, standalone)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// adaptation time

int steps_to_threshold(const std::vector<std::pair<int, double>>& curve, double threshold, int patience) {
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const int start = curve[i].first;
    if (curve.back().first < start + patience) return -1;
    bool ok = true;
    for (std::size_t j = i; j < curve.size() && curve[j].first <= start + patience; ++j)
      ok = ok && curve[j].second >= threshold;
    if (ok) return start;
  }
  return -1;
}

double return_threshold(double reference, double fraction) {
  return reference - (1 - fraction) * std::abs(reference);
}

namespace {

// Trains from `init` and evaluates every eval_every steps until the
// threshold is held for `patience` steps or the budget runs out.
int steps_from(const QNetwork& init, const Dataset& support, const EnvSpec& spec,
               const std::vector<std::uint64_t>& seeds, double threshold, std::uint64_t replay_seed,
               const AdaptationConfig& cfg) {
  Trainer trainer(init, support, cfg.train, replay_seed);
  std::vector<std::pair<int, double>> curve;
  const int last = cfg.max_steps + cfg.patience;
  for (int step = 0;; step += cfg.eval_every) {
    if (step > 0) trainer.run(cfg.eval_every);
    QPolicy policy(trainer.network());
    curve.emplace_back(step, evaluate_policy(spec, policy, cfg.eval.horizon, seeds).reward_mean);
    const int s = steps_to_threshold(curve, threshold, cfg.patience);
    if (s >= 0) return s <= cfg.max_steps ? s : -1;
    if (step >= last) return -1;
    if (curve.back().second < threshold && step >= cfg.max_steps) return -1;
  }
}

}  // namespace

AdaptationSummary adaptation_time_study(const std::vector<EnvSpec>& new_envs,
                                        const std::vector<Dataset>& supports,
                                        const TaskForest& forest,
                                        const std::map<std::string, MetaModel>& meta_models,
                                        const AdaptationConfig& config) {
  if (new_envs.size() != supports.size()) throw InvalidConfig("one support set per new combination");
  if (config.eval_every < 1 || config.max_steps < 0 || config.patience < 0)
    throw InvalidConfig("adaptation budget out of range");
  AdaptationSummary out;
  out.runs.resize(new_envs.size());
  parallel_for(new_envs.size(), config.eval.workers, [&](std::size_t i) {
    const EnvSpec& spec = new_envs[i];
    const Dataset& support = supports[i];
    const std::string name = spec.combination.name();
    const TaskSelection sel = select_task(spec.combination, forest);
    auto it = meta_models.find(sel.task_id);
    if (it == meta_models.end()) throw MissingArtifact("no meta-model for " + sel.task_id);
    const auto seeds = eval_seeds(config.eval.seed, spec.combination, config.eval.episodes);
    const std::uint64_t base = derive_seed(config.eval.seed, "adapt." + name);

    QNetwork ref = train_on_dataset(support, [&] {
      TrainConfig t = config.train;
      t.train_steps = config.reference_steps;
      return t;
    }(), config.net, derive_seed(base, "reference"));
    QPolicy ref_policy(ref);
    AdaptationRun run;
    run.combination = name;
    run.task_id = sel.task_id;
    run.reference = evaluate_policy(spec, ref_policy, config.eval.horizon, seeds).reward_mean;
    run.threshold = return_threshold(run.reference, config.fraction);

    QNetwork meta_init = it->second.network;
    meta_init.normalizer.fit(support);
    const QNetwork scratch = init_qnetwork(support, config.net, derive_seed(base, "scratch"));
    const std::uint64_t replay = derive_seed(base, "replay");
    run.steps_meta = steps_from(meta_init, support, spec, seeds, run.threshold, replay, config);
    run.steps_baseline = steps_from(scratch, support, spec, seeds, run.threshold, replay, config);
    if (run.steps_meta >= 0 && run.steps_baseline >= 0)
      run.speedup = static_cast<double>(run.steps_baseline) / std::max(run.steps_meta, 1);
    out.runs[i] = run;
  });

  std::vector<double> meta, baseline;
  for (const auto& r : out.runs) {
    if (r.steps_meta < 0 || r.steps_baseline < 0) {
      ++out.non_converged;
      continue;
    }
    meta.push_back(r.steps_meta);
    baseline.push_back(r.steps_baseline);
  }
  std::tie(out.meta_mean, out.meta_sd) = mean_sd(meta);
  std::tie(out.baseline_mean, out.baseline_sd) = mean_sd(baseline);
  out.meta_median = median(meta);
  out.baseline_median = median(baseline);
  if (out.baseline_median > 0)
    out.median_ratio = out.meta_median / out.baseline_median;
  else
    out.median_ratio = out.meta_median > 0 || meta.empty() ? std::numeric_limits<double>::infinity() : 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// tau sweep

std::vector<SweepPoint> tau_sweep(QEvaluator& eval, const std::vector<int>& tau_values, ForestConfig config) {
  if (tau_values.empty()) throw InvalidConfig("tau sweep needs at least one value");
  const int n = static_cast<int>(eval.inputs().size());
  std::vector<SweepPoint> out;
  for (int tau : tau_values) {
    config.tau_cap = tau;
    std::vector<MergeTraceEntry> trace;
    const TaskForest f = build_forest(eval, config, &trace);
    SweepPoint p;
    p.tau = tau;
    p.roots = f.roots.size();
    p.definition_evaluations = n;
    for (const auto& e : trace) p.definition_evaluations += e.candidates_evaluated;
    for (int i = 0; i < n; ++i) p.per_combination.push_back(member_q(eval, f.node(root_of(f, i)).members, i));
    p.fqe_q = std::accumulate(p.per_combination.begin(), p.per_combination.end(), 0.0) / n;
    out.push_back(std::move(p));
  }
  double best = -std::numeric_limits<double>::infinity();
  int most = 0;
  for (const auto& p : out) {
    best = std::max(best, p.fqe_q);
    most = std::max(most, p.definition_evaluations);
  }
  for (auto& p : out) {
    // ratio to the best; for a negative best the scale flips so the best is still 1
    p.norm_fqe_q = best > 0 ? p.fqe_q / best : (best < 0 ? best / p.fqe_q : (p.fqe_q == 0 ? 1.0 : 0.0));
    p.definition_time_norm = most > 0 ? static_cast<double>(p.definition_evaluations) / most : 0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// reports

std::string comparison_csv(const std::vector<NormalizedResult>& rows) {
  std::string out = "method,device,app,norm_ppw,norm_qoe,ppw,qoe\n";
  for (const auto& r : rows)
    out += r.method + ',' + r.device_id + ',' + r.app_id + ',' + num(r.norm_ppw) + ',' + num(r.norm_qoe) + ',' +
           num(r.ppw) + ',' + num(r.qoe) + '\n';
  return out;
}

std::string effectiveness_csv(const std::vector<EffectivenessCell>& cells) {
  std::string out = "device,app,strategy,fqe_q,improvement_pct\n";
  for (const auto& c : cells)
    out += c.device_id + ',' + c.app_id + ',' + to_string(c.strategy) + ',' + num(c.fqe_q) + ',' +
           num(c.improvement_pct) + '\n';
  return out;
}

std::string adaptation_csv(const AdaptationSummary& s) {
  std::string out = "combination,task_id,reference,threshold,steps_meta,steps_baseline,speedup\n";
  for (const auto& r : s.runs)
    out += r.combination + ',' + r.task_id + ',' + num(r.reference) + ',' + num(r.threshold) + ',' +
           std::to_string(r.steps_meta) + ',' + std::to_string(r.steps_baseline) + ',' + num(r.speedup) + '\n';
  return out;
}

std::string sweep_csv(const std::vector<SweepPoint>& points) {
  std::string out = "tau,fqe_q,norm_fqe_q,definition_evaluations,definition_time_norm,roots\n";
  for (const auto& p : points)
    out += std::to_string(p.tau) + ',' + num(p.fqe_q) + ',' + num(p.norm_fqe_q) + ',' +
           std::to_string(p.definition_evaluations) + ',' + num(p.definition_time_norm) + ',' +
           std::to_string(p.roots) + '\n';
  return out;
}

std::string SeedManifest::dump() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, seed] : seeds) j[name] = seed;
  return nlohmann::json{{"format", "metadvfs-seeds"}, {"version", 1}, {"seeds", j}}.dump(1) + "\n";
}

std::string report_header() {
  nlohmann::json w = nlohmann::json::object();
  for (Category c : {Category::video, Category::interactive, Category::graphics}) {
    const QoeWeights q = qoe_weights(c);
    w[to_string(c)] = {{"attainment", q.attainment}, {"smoothness", q.smoothness}, {"latency", q.latency}};
  }
  nlohmann::json ref = {
      {"adaptation_minutes", {{"meta", "3.5+-1.1"}, {"scratch", "11.8+-5.2"}}},
      {"effectiveness_pct", {{"task_specific", "+5.8..+27.6 (mean 15.2)"}, {"global", "-13.9..+14.0 (mean -1.8)"}}},
      {"tau_curve", {{"1", 0.76}, {"5", 1.00}, {"6", 0.98}, {"7", 0.95}}}};
  return nlohmann::json{{"qoe_weights", w}, {"published_reference", ref}}.dump(1) + "\n";
}

}  // namespace metadvfs

#include "metadvfs/simenv.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace metadvfs {

namespace {

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double gaussian(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

std::vector<double> log_spaced(double lo, double hi, int n) {
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double t = n == 1 ? 1.0 : static_cast<double>(i) / (n - 1);
    out[static_cast<std::size_t>(i)] = std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo)));
  }
  out.front() = lo;
  out.back() = hi;
  return out;
}

int sensitivity_level(const std::string& token) {
  if (token == "low") return 1;
  if (token == "medium") return 2;
  if (token == "high") return 3;
  if (token == "very_high") return 4;
  throw InvalidMetadata("sensitivity '" + token + "'");
}

double resolution_factor(const std::string& token) {
  if (token == "720p") return 0.6;
  if (token == "1080p") return 1.0;
  if (token == "1440p") return 1.5;
  if (token == "2160p") return 2.2;
  return 1.2;  // variable / unknown render resolution
}

int nearest_level(std::span<const double> levels, double mhz) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(levels.size()); ++i)
    if (std::abs(levels[static_cast<std::size_t>(i)] - mhz) <
        std::abs(levels[static_cast<std::size_t>(best)] - mhz))
      best = i;
  return best;
}

constexpr int kCpuLevels = 8;
constexpr int kGpuLevels = 6;

}  // namespace

Category parse_category(const std::string& token) {
  if (token == "video") return Category::video;
  if (token == "interactive") return Category::interactive;
  if (token == "graphics") return Category::graphics;
  throw InvalidMetadata("category '" + token + "'");
}

std::string to_string(Category c) {
  switch (c) {
    case Category::video: return "video";
    case Category::interactive: return "interactive";
    case Category::graphics: return "graphics";
  }
  return "video";
}

// ---------------------------------------------------------------------------
// EnvSpec

std::vector<int> EnvSpec::branch_sizes() const {
  std::vector<int> sizes;
  for (const auto& c : cpu_clusters) sizes.push_back(static_cast<int>(c.freq_levels.size()));
  sizes.push_back(static_cast<int>(gpu.freq_levels.size()));
  return sizes;
}

double EnvSpec::capacity(const FreqDomain& d, double freq_mhz) const {
  return d.capacity_coeff * d.core_count * (freq_mhz / 1000.0) * process_efficiency;
}

double EnvSpec::power(const FreqDomain& d, double freq_mhz, double util) {
  const double ghz = freq_mhz / 1000.0;
  return d.power_coeff * util * ghz * ghz * ghz + d.static_power_mw;
}

double EnvSpec::static_power_total() const {
  double p = gpu.static_power_mw;
  for (const auto& c : cpu_clusters) p += c.static_power_mw;
  return p;
}

double EnvSpec::max_power() const {
  double p = power(gpu, gpu.freq_levels.back(), 1.0);
  for (const auto& c : cpu_clusters) p += power(c, c.freq_levels.back(), 1.0);
  return p;
}

double EnvSpec::frame_cap_fps() const {
  return workload.variable_target() ? kRefreshCapFps : workload.target_fps;
}

double EnvSpec::latency_target_ms() const {
  if (reward.latency_target_ms > 0) return reward.latency_target_ms;
  return workload.variable_target() ? 100.0 : 1000.0 / workload.target_fps;
}

double EnvSpec::power_weight() const {
  return reward.power_weight > 0 ? reward.power_weight : 1.0 / max_power();
}

double EnvSpec::max_fps() const {
  Action top;
  for (const auto& c : cpu_clusters)
    top.cluster_freq_idx.push_back(static_cast<int>(c.freq_levels.size()) - 1);
  top.gpu_freq_idx = static_cast<int>(gpu.freq_levels.size()) - 1;
  double t_max = 0;
  for (std::size_t i = 0; i < cpu_clusters.size(); ++i) {
    const auto& c = cpu_clusters[i];
    t_max = std::max(t_max, c.work_share * workload.cpu_demand.mean_work /
                                capacity(c, c.freq_levels.back()));
  }
  t_max = std::max(t_max, workload.gpu_demand.mean_work / capacity(gpu, gpu.freq_levels.back()));
  const double frame = std::max(t_max + workload.io_weight * workload.cpu_demand.mean_work,
                                1000.0 / frame_cap_fps());
  return 1000.0 / frame;
}

// ---------------------------------------------------------------------------
// state / action encoding

std::vector<double> EnvState::to_vector() const {
  std::vector<double> v;
  v.reserve(2 * cpu_util.size() + 4);
  v.push_back(ipc);
  v.insert(v.end(), cpu_util.begin(), cpu_util.end());
  v.insert(v.end(), cpu_freq.begin(), cpu_freq.end());
  v.push_back(gpu_util);
  v.push_back(gpu_freq);
  v.push_back(power_mw);
  return v;
}

EnvState EnvState::from_vector(std::span<const double> v, int clusters) {
  const auto n = static_cast<std::size_t>(clusters);
  if (v.size() != 2 * n + 4) throw ArityMismatch("state vector size " + std::to_string(v.size()));
  EnvState s;
  s.ipc = v[0];
  s.cpu_util.assign(v.begin() + 1, v.begin() + 1 + static_cast<std::ptrdiff_t>(n));
  s.cpu_freq.assign(v.begin() + 1 + static_cast<std::ptrdiff_t>(n),
                    v.begin() + 1 + static_cast<std::ptrdiff_t>(2 * n));
  s.gpu_util = v[2 * n + 1];
  s.gpu_freq = v[2 * n + 2];
  s.power_mw = v[2 * n + 3];
  return s;
}

std::vector<int> Action::to_branches() const {
  std::vector<int> b = cluster_freq_idx;
  b.push_back(gpu_freq_idx);
  return b;
}

Action Action::from_branches(std::span<const int> b) {
  if (b.empty()) throw ArityMismatch("empty action");
  Action a;
  a.cluster_freq_idx.assign(b.begin(), b.end() - 1);
  a.gpu_freq_idx = b.back();
  return a;
}

// ---------------------------------------------------------------------------
// generation

EnvSpec generate_env(const MetadataRecord& device, const MetadataRecord& app,
                     std::uint64_t seed, const RewardConfig& reward) {
  if (device.kind != RecordKind::device || app.kind != RecordKind::application)
    throw InvalidMetadata("generate_env needs (device, application) records");
  EnvSpec spec;
  spec.combination = make_combination(device, app);
  spec.seed = seed;
  spec.reward = reward;

  const auto topology = parse_topology(device.at("cpu_topology"));
  const auto cpu_range = parse_freq_range(device.at("cpu_freq_range"));
  const auto gpu_range = parse_freq_range(device.at("gpu_freq_range"));
  const double nm = parse_process_nm(device.at("process_node"));

  Rng rng(derive_seed(seed, "envgen"));
  // Process jitter is the first draw so devices compare under identical draws.
  spec.process_efficiency = std::pow(7.0 / nm, 0.4) * uniform(rng, 0.97, 1.03);

  const int n = static_cast<int>(topology.size());
  double total_top_capacity = 0;
  for (int i = 0; i < n; ++i) {
    const double rel = n == 1 ? 1.0 : static_cast<double>(i) / (n - 1);
    FreqDomain c;
    c.core_count = topology[static_cast<std::size_t>(i)];
    const double top_frac = n == 1 ? 1.0 : 0.65 + 0.35 * rel;
    const double top = cpu_range.lo_mhz + (cpu_range.hi_mhz - cpu_range.lo_mhz) * top_frac;
    c.freq_levels = log_spaced(cpu_range.lo_mhz, top, kCpuLevels);
    c.capacity_coeff = (0.6 + 0.6 * rel) * uniform(rng, 0.9, 1.1);
    c.power_coeff = c.core_count * (25.0 + 35.0 * rel) * uniform(rng, 0.9, 1.1) /
                    spec.process_efficiency;
    c.static_power_mw = (10.0 + 5.0 * c.core_count) * uniform(rng, 0.9, 1.1);
    spec.cpu_clusters.push_back(c);
    total_top_capacity += spec.capacity(c, c.freq_levels.back());
  }
  for (auto& c : spec.cpu_clusters)
    c.work_share = spec.capacity(c, c.freq_levels.back()) / total_top_capacity;

  spec.gpu.core_count = 1;
  spec.gpu.freq_levels = log_spaced(gpu_range.lo_mhz, gpu_range.hi_mhz, kGpuLevels);
  spec.gpu.capacity_coeff = 20.0 * uniform(rng, 0.9, 1.1);
  spec.gpu.power_coeff = 1500.0 * uniform(rng, 0.9, 1.1) / spec.process_efficiency;
  spec.gpu.static_power_mw = 30.0 * uniform(rng, 0.9, 1.1);
  spec.gpu.work_share = 1.0;

  auto& w = spec.workload;
  w.category = parse_category(app.at("category"));
  const std::string& fps = app.at("target_fps");
  w.target_fps = fps == "variable" ? 0.0 : std::stod(fps);
  const int cpu_level = sensitivity_level(app.at("cpu_sensitivity"));
  const int gpu_level = sensitivity_level(app.at("gpu_sensitivity"));
  const int io_level = sensitivity_level(app.at("io_sensitivity"));
  w.cpu_demand.mean_work = (25.0 + 25.0 * cpu_level) * uniform(rng, 0.95, 1.05);
  w.gpu_demand.mean_work = (30.0 + 40.0 * gpu_level) * resolution_factor(app.at("resolution")) *
                           uniform(rng, 0.95, 1.05);
  w.io_weight = 0.01 * io_level;
  switch (w.category) {
    case Category::video:
      w.base_ipc = 1.3;
      w.cpu_demand.noise = w.gpu_demand.noise = 0.08;
      break;
    case Category::interactive:
      w.base_ipc = 1.0;
      for (auto* d : {&w.cpu_demand, &w.gpu_demand}) {
        d->noise = 0.2;
        d->burst_multiplier = 3.0;
        d->idle_multiplier = 0.4;
        d->p_enter_burst = 0.1;
        d->p_exit_burst = 0.25;
      }
      break;
    case Category::graphics:
      w.base_ipc = 0.8;
      w.gpu_demand.mean_work = std::max(w.gpu_demand.mean_work, 1.5 * w.cpu_demand.mean_work);
      for (auto* d : {&w.cpu_demand, &w.gpu_demand}) {
        d->noise = 0.1;
        d->drift = 0.9;
      }
      break;
  }
  w.base_ipc *= std::pow(spec.process_efficiency, 0.2);
  return spec;
}

// ---------------------------------------------------------------------------
// dynamics

StepOutcome evaluate_interval(const EnvSpec& spec, const Action& action,
                              const Demand& demand, double ipc_noise,
                              double& quality_state) {
  const auto n = spec.cpu_clusters.size();
  StepOutcome out;
  out.demand = demand;
  auto& s = out.next_state;
  s.cpu_util.resize(n);
  s.cpu_freq.resize(n);

  std::vector<double> busy_ms(n);
  double critical = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& c = spec.cpu_clusters[i];
    const double f = c.freq_levels.at(static_cast<std::size_t>(action.cluster_freq_idx.at(i)));
    s.cpu_freq[i] = f;
    busy_ms[i] = c.work_share * demand.cpu_work / spec.capacity(c, f);
    critical = std::max(critical, busy_ms[i]);
  }
  const double gpu_f = spec.gpu.freq_levels.at(static_cast<std::size_t>(action.gpu_freq_idx));
  const double gpu_busy = demand.gpu_work / spec.capacity(spec.gpu, gpu_f);
  critical = std::max(critical, gpu_busy);

  const double raw_frame = critical + spec.workload.io_weight * demand.cpu_work;
  const double frame_ms = std::max(raw_frame, 1000.0 / spec.frame_cap_fps());
  out.fps = 1000.0 / frame_ms;
  out.latency_ms = frame_ms;

  double power = 0;
  double max_util = 0;
  for (std::size_t i = 0; i < n; ++i) {
    s.cpu_util[i] = std::min(1.0, busy_ms[i] / frame_ms);
    max_util = std::max(max_util, s.cpu_util[i]);
    power += EnvSpec::power(spec.cpu_clusters[i], s.cpu_freq[i], s.cpu_util[i]);
  }
  s.gpu_freq = gpu_f;
  s.gpu_util = std::min(1.0, gpu_busy / frame_ms);
  power += EnvSpec::power(spec.gpu, gpu_f, s.gpu_util);
  s.power_mw = power;
  out.power_mw = power;
  s.ipc = std::max(0.05, spec.workload.base_ipc * (1.0 - 0.35 * max_util * max_util) *
                             (1.0 + ipc_noise));

  const double l_star = spec.latency_target_ms();
  switch (spec.workload.category) {
    case Category::video:
      out.quality = std::min(out.fps / spec.workload.target_fps, 1.0);
      break;
    case Category::interactive: {
      const double a = spec.reward.quality_ema;
      quality_state = (1.0 - a) * quality_state + a * (out.latency_ms <= l_star ? 1.0 : 0.0);
      out.quality = quality_state;
      break;
    }
    case Category::graphics:
      out.quality = std::min(out.fps / spec.max_fps(), 1.0);
      break;
  }
  out.perf = spec.workload.category == Category::interactive ? 1000.0 / out.latency_ms : out.fps;
  out.reward = -spec.power_weight() * power + spec.reward.quality_weight * out.quality -
               spec.reward.latency_weight * std::max(0.0, out.latency_ms - l_star);
  return out;
}

DvfsEnv::DvfsEnv(EnvSpec spec) : spec_(std::move(spec)) { reset(spec_.seed); }

std::vector<double> DvfsEnv::reset(std::uint64_t seed) {
  rng_.seed(derive_seed(seed, "env.step"));
  cpu_burst_ = gpu_burst_ = false;
  scene_ = 1.0;
  quality_state_ = 1.0;
  state_ = EnvState{};
  for (const auto& c : spec_.cpu_clusters) {
    state_.cpu_util.push_back(0.0);
    state_.cpu_freq.push_back(c.freq_levels[c.freq_levels.size() / 2]);
  }
  state_.gpu_util = 0.0;
  state_.gpu_freq = spec_.gpu.freq_levels[spec_.gpu.freq_levels.size() / 2];
  state_.power_mw = spec_.static_power_total();
  state_.ipc = spec_.workload.base_ipc;
  return state_.to_vector();
}

Demand DvfsEnv::draw_demand() {
  const auto& w = spec_.workload;
  // Fixed number of draws per step regardless of profile.
  const double u_cpu = uniform(rng_, 0.0, 1.0);
  const double u_gpu = uniform(rng_, 0.0, 1.0);
  const double z_scene = gaussian(rng_);
  const double z_cpu = gaussian(rng_);
  const double z_gpu = gaussian(rng_);

  auto regime = [](const DemandProcess& d, bool& burst, double u) {
    if (d.p_enter_burst <= 0 && d.p_exit_burst <= 0) return 1.0;
    if (burst) {
      if (u < d.p_exit_burst) burst = false;
    } else if (u < d.p_enter_burst) {
      burst = true;
    }
    return burst ? d.burst_multiplier : d.idle_multiplier;
  };
  const double cpu_mult = regime(w.cpu_demand, cpu_burst_, u_cpu);
  const double gpu_mult = regime(w.gpu_demand, gpu_burst_, u_gpu);
  if (w.gpu_demand.drift > 0) {
    const double a = w.gpu_demand.drift;
    scene_ = std::clamp(a * scene_ + (1.0 - a) + 0.1 * z_scene, 0.5, 1.8);
  }
  Demand d;
  d.cpu_work = w.cpu_demand.mean_work * cpu_mult * scene_ *
               std::max(0.0, 1.0 + w.cpu_demand.noise * z_cpu);
  d.gpu_work = w.gpu_demand.mean_work * gpu_mult * scene_ *
               std::max(0.0, 1.0 + w.gpu_demand.noise * z_gpu);
  return d;
}

StepOutcome DvfsEnv::step_with_demand(const Action& action, const Demand& demand) {
  const double ipc_noise = 0.03 * gaussian(rng_);
  auto out = evaluate_interval(spec_, action, demand, ipc_noise, quality_state_);
  state_ = out.next_state;
  return out;
}

StepOutcome DvfsEnv::step(const Action& action) {
  if (action.cluster_freq_idx.size() != spec_.cpu_clusters.size())
    throw ArityMismatch("action has " + std::to_string(action.cluster_freq_idx.size()) +
                        " cluster branches");
  const Demand d = draw_demand();
  return step_with_demand(action, d);
}

StepOutcome DvfsEnv::step(std::span<const int> branches) {
  return step(Action::from_branches(branches));
}

// ---------------------------------------------------------------------------
// policies

int schedutil_level(std::span<const double> levels, double util, double current_mhz,
                    double headroom) {
  const double want = headroom * util * current_mhz;
  for (std::size_t i = 0; i < levels.size(); ++i)
    if (levels[i] >= want) return static_cast<int>(i);
  return static_cast<int>(levels.size()) - 1;
}

Action schedutil_policy(const EnvSpec& spec, const EnvState& state,
                        const SchedutilConfig& config) {
  Action a;
  for (std::size_t i = 0; i < spec.cpu_clusters.size(); ++i)
    a.cluster_freq_idx.push_back(schedutil_level(spec.cpu_clusters[i].freq_levels,
                                                 state.cpu_util[i], state.cpu_freq[i],
                                                 config.headroom));
  const auto& levels = spec.gpu.freq_levels;
  const int top = static_cast<int>(levels.size()) - 1;
  switch (config.gpu) {
    case GpuGovernor::schedutil_rule:
      a.gpu_freq_idx = schedutil_level(levels, state.gpu_util, state.gpu_freq, config.headroom);
      break;
    case GpuGovernor::fixed_mid:
      a.gpu_freq_idx = top / 2;
      break;
    case GpuGovernor::ladder: {
      const int cur = nearest_level(levels, state.gpu_freq);
      a.gpu_freq_idx = state.gpu_util > 0.85 ? std::min(cur + 1, top)
                       : state.gpu_util < 0.4 ? std::max(cur - 1, 0)
                                              : cur;
      break;
    }
  }
  return a;
}

std::vector<int> SchedutilPolicy::act(std::span<const double> state, Rng&) {
  return schedutil_policy(spec_, EnvState::from_vector(state, spec_.cluster_count()), config_)
      .to_branches();
}

std::vector<int> EpsilonMixPolicy::act(std::span<const double> state, Rng& rng) {
  auto a = inner_->act(state, rng);
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double u = uniform(rng, 0.0, 1.0);
    const int level = std::uniform_int_distribution<int>(0, sizes_[j] - 1)(rng);
    if (u < epsilon_) a[j] = level;
  }
  return a;
}

std::vector<int> MaxFrequencyPolicy::act(std::span<const double>, Rng&) {
  std::vector<int> a;
  for (int s : sizes_) a.push_back(s - 1);
  return a;
}

RolloutResult rollout(Environment& env, Policy& policy, int horizon, std::uint64_t seed) {
  if (horizon < 1) throw InvalidConfig("rollout horizon must be >= 1");
  RolloutResult result;
  result.dataset.state_dim = env.state_dim();
  result.dataset.branch_sizes = env.branch_sizes();
  result.dataset.items.reserve(static_cast<std::size_t>(horizon));
  result.outcomes.reserve(static_cast<std::size_t>(horizon));
  Rng rng(derive_seed(seed, "rollout.policy"));
  policy.reset();
  std::vector<double> s = env.reset(seed);
  for (int t = 0; t < horizon; ++t) {
    auto a = policy.act(s, rng);
    auto out = env.step(a);
    std::vector<double> next = env.observe();
    result.dataset.items.push_back({s, a, out.reward, next, 0});
    result.outcomes.push_back(std::move(out));
    s = std::move(next);
  }
  return result;
}

Dataset collect_dataset(const EnvSpec& spec, const CollectConfig& config, std::uint64_t seed) {
  if (config.episodes < 1) throw InvalidConfig("collect needs at least one episode");
  DvfsEnv env(spec);
  auto inner = std::make_shared<SchedutilPolicy>(spec, config.governor);
  EpsilonMixPolicy policy(inner, spec.branch_sizes(), config.epsilon);
  Dataset out{spec.state_dim(), spec.branch_sizes(), {}};
  for (int e = 0; e < config.episodes; ++e) {
    auto r = rollout(env, policy, config.horizon, derive_seed_index(seed, static_cast<std::uint64_t>(e)));
    for (auto& t : r.dataset.items) {
      t.episode = e;
      out.items.push_back(std::move(t));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// serialization

namespace {

nlohmann::json domain_json(const FreqDomain& d) {
  return {{"core_count", d.core_count},       {"freq_levels", d.freq_levels},
          {"capacity_coeff", d.capacity_coeff}, {"power_coeff", d.power_coeff},
          {"static_power_mw", d.static_power_mw}, {"work_share", d.work_share}};
}

FreqDomain domain_from(const nlohmann::json& j) {
  FreqDomain d;
  d.core_count = j.at("core_count");
  d.freq_levels = j.at("freq_levels").get<std::vector<double>>();
  d.capacity_coeff = j.at("capacity_coeff");
  d.power_coeff = j.at("power_coeff");
  d.static_power_mw = j.at("static_power_mw");
  d.work_share = j.at("work_share");
  return d;
}

nlohmann::json demand_json(const DemandProcess& d) {
  return {{"mean_work", d.mean_work},
          {"noise", d.noise},
          {"burst_multiplier", d.burst_multiplier},
          {"idle_multiplier", d.idle_multiplier},
          {"p_enter_burst", d.p_enter_burst},
          {"p_exit_burst", d.p_exit_burst},
          {"drift", d.drift}};
}

DemandProcess demand_from(const nlohmann::json& j) {
  DemandProcess d;
  d.mean_work = j.at("mean_work");
  d.noise = j.at("noise");
  d.burst_multiplier = j.at("burst_multiplier");
  d.idle_multiplier = j.at("idle_multiplier");
  d.p_enter_burst = j.at("p_enter_burst");
  d.p_exit_burst = j.at("p_exit_burst");
  d.drift = j.at("drift");
  return d;
}

}  // namespace

std::string dump_env_spec(const EnvSpec& spec) {
  nlohmann::json clusters = nlohmann::json::array();
  for (const auto& c : spec.cpu_clusters) clusters.push_back(domain_json(c));
  const auto& w = spec.workload;
  nlohmann::json j = {
      {"format", "metadvfs-envspec"},
      {"version", 1},
      {"device_id", spec.combination.device_id},
      {"app_id", spec.combination.app_id},
      {"merged_attributes", spec.combination.merged_attributes},
      {"seed", spec.seed},
      {"process_efficiency", spec.process_efficiency},
      {"cpu_clusters", clusters},
      {"gpu", domain_json(spec.gpu)},
      {"workload",
       {{"category", to_string(w.category)},
        {"target_fps", w.target_fps},
        {"cpu_demand", demand_json(w.cpu_demand)},
        {"gpu_demand", demand_json(w.gpu_demand)},
        {"io_weight", w.io_weight},
        {"base_ipc", w.base_ipc}}},
      {"reward",
       {{"power_weight", spec.reward.power_weight},
        {"quality_weight", spec.reward.quality_weight},
        {"latency_weight", spec.reward.latency_weight},
        {"latency_target_ms", spec.reward.latency_target_ms},
        {"quality_ema", spec.reward.quality_ema}}}};
  return j.dump(2) + "\n";
}

EnvSpec parse_env_spec(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format", "") != "metadvfs-envspec") throw ParseError("not an env spec");
    EnvSpec spec;
    spec.combination.device_id = j.at("device_id");
    spec.combination.app_id = j.at("app_id");
    spec.combination.merged_attributes = j.at("merged_attributes").get<AttributeMap>();
    spec.seed = j.at("seed");
    spec.process_efficiency = j.at("process_efficiency");
    for (const auto& c : j.at("cpu_clusters")) spec.cpu_clusters.push_back(domain_from(c));
    spec.gpu = domain_from(j.at("gpu"));
    const auto& w = j.at("workload");
    spec.workload.category = parse_category(w.at("category"));
    spec.workload.target_fps = w.at("target_fps");
    spec.workload.cpu_demand = demand_from(w.at("cpu_demand"));
    spec.workload.gpu_demand = demand_from(w.at("gpu_demand"));
    spec.workload.io_weight = w.at("io_weight");
    spec.workload.base_ipc = w.at("base_ipc");
    const auto& r = j.at("reward");
    spec.reward.power_weight = r.at("power_weight");
    spec.reward.quality_weight = r.at("quality_weight");
    spec.reward.latency_weight = r.at("latency_weight");
    spec.reward.latency_target_ms = r.at("latency_target_ms");
    spec.reward.quality_ema = r.at("quality_ema");
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what());
  }
}

}  // namespace metadvfs

#include "metadvfs/pipeline.hpp"

#include <algorithm>
#include <iostream>
#include <mutex>
#include <set>

#include <nlohmann/json.hpp>

#ifndef METADVFS_VERSION
#define METADVFS_VERSION "0.0.0"
#endif

namespace metadvfs {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Files = std::vector<std::pair<std::string, std::string>>;

// ---------------------------------------------------------------------------
// config

const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m = {"schedutil", "plain_dqn", "metadvfs", "wo_maml", "wo_clu", "wo_lnn"};
  return m;
}

void RunConfig::validate() const {
  if (catalog.empty()) throw InvalidConfig("config needs a catalog");
  if (!fs::exists(catalog)) throw MissingArtifact("catalog " + catalog.string());
  if (!new_catalog.empty() && !fs::exists(new_catalog)) throw MissingArtifact("new catalog " + new_catalog.string());
  if (samples_per_combination < 2 || episodes_per_combination < 1 ||
      samples_per_combination % episodes_per_combination != 0)
    throw InvalidConfig("samples_per_combination must be a multiple of episodes_per_combination and >= 2");
  if (support_samples < 2) throw InvalidConfig("support_samples must be >= 2");
  if (collect_epsilon < 0 || collect_epsilon > 1) throw InvalidConfig("collect_epsilon must be in [0, 1]");
  if (tau_cap < 1) throw InvalidConfig("tau_cap must be >= 1");
  if (delta < 0) throw InvalidConfig("delta must be >= 0");
  train.validate();
  meta.validate();
  if (eval.horizon < 1 || eval.episodes < 1) throw InvalidConfig("eval horizon and episodes must be >= 1");
  for (const auto& m : methods)
    if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end())
      throw InvalidConfig("unknown method " + m);
  if (tau_values.empty()) throw InvalidConfig("tau_values must not be empty");
  for (int t : tau_values)
    if (t < 0) throw InvalidConfig("tau values must be >= 0");
}

namespace {

template <class T>
void take(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

std::vector<ComboName> combos_from(const json& j) {
  std::vector<ComboName> out;
  for (const auto& c : j) out.emplace_back(c.at(0).get<std::string>(), c.at(1).get<std::string>());
  return out;
}

json combos_json(const std::vector<ComboName>& v) {
  json out = json::array();
  for (const auto& [d, a] : v) out.push_back({d, a});
  return out;
}

CellType parse_cell(const std::string& s) {
  if (s == "ltc") return CellType::ltc;
  if (s == "rnn") return CellType::rnn;
  throw InvalidConfig("unknown cell " + s);
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const fs::path& base_dir) {
  RunConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  try {
    auto path = [&](const char* key, fs::path& field) {
      if (!j.contains(key)) return;
      fs::path p = j.at(key).get<std::string>();
      field = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
    path("catalog", c.catalog);
    path("new_catalog", c.new_catalog);
    take(j, "seed", c.seed);
    take(j, "samples_per_combination", c.samples_per_combination);
    take(j, "episodes_per_combination", c.episodes_per_combination);
    take(j, "support_samples", c.support_samples);
    take(j, "collect_epsilon", c.collect_epsilon);
    if (j.contains("combinations")) c.combinations = combos_from(j.at("combinations"));
    if (j.contains("new_combinations")) c.new_combinations = combos_from(j.at("new_combinations"));
    take(j, "tau_cap", c.tau_cap);
    take(j, "delta", c.delta);
    if (j.contains("q")) {
      const json& q = j.at("q");
      take(q, "discount_factor", c.train.discount_factor);
      take(q, "learn_rate", c.train.learn_rate);
      take(q, "batch_size", c.train.batch_size);
      take(q, "sequence_len", c.train.sequence_len);
      take(q, "target_update_interval", c.train.target_update_interval);
      take(q, "train_steps", c.train.train_steps);
      take(q, "grad_clip", c.train.grad_clip);
      take(q, "hidden", c.net.hidden);
      take(q, "steps_per_input", c.net.steps_per_input);
      take(q, "dt", c.net.dt);
      if (q.contains("cell")) c.net.cell = parse_cell(q.at("cell").get<std::string>());
      take(q, "fqe_max_iterations", c.fqe.max_iterations);
      take(q, "fqe_tolerance", c.fqe.tolerance);
    }
    if (j.contains("meta")) {
      const json& m = j.at("meta");
      take(m, "inner_lr", c.meta.inner_lr);
      take(m, "inner_steps", c.meta.inner_steps);
      take(m, "meta_lr", c.meta.meta_lr);
      take(m, "outer_steps", c.meta.outer_steps);
      take(m, "support_fraction", c.meta.support_fraction);
      if (m.contains("order")) c.meta.order = m.at("order").get<std::string>() == "second" ? MetaOrder::second : MetaOrder::first;
      take(m, "adapt_steps", c.adapt_steps);
    }
    if (j.contains("eval")) {
      const json& e = j.at("eval");
      take(e, "horizon", c.eval.horizon);
      take(e, "episodes", c.eval.episodes);
      take(e, "methods", c.methods);
      take(e, "effectiveness", c.effectiveness);
      take(e, "adaptation_study", c.adaptation_study);
      take(e, "reference_steps", c.reference_steps);
      take(e, "adapt_max_steps", c.adapt_max_steps);
      take(e, "adapt_eval_every", c.adapt_eval_every);
      take(e, "adapt_patience", c.adapt_patience);
      take(e, "adapt_fraction", c.adapt_fraction);
      take(e, "tau_values", c.tau_values);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  c.meta.discount_factor = c.train.discount_factor;
  c.meta.batch_size = c.train.batch_size;
  c.meta.sequence_len = c.train.sequence_len;
  return c;
}

std::string dump_run_config(const RunConfig& c) {
  json j = {
      {"catalog", c.catalog.string()},
      {"new_catalog", c.new_catalog.string()},
      {"seed", c.seed},
      {"samples_per_combination", c.samples_per_combination},
      {"episodes_per_combination", c.episodes_per_combination},
      {"support_samples", c.support_samples},
      {"collect_epsilon", c.collect_epsilon},
      {"combinations", combos_json(c.combinations)},
      {"new_combinations", combos_json(c.new_combinations)},
      {"tau_cap", c.tau_cap},
      {"delta", c.delta},
      {"q",
       {{"discount_factor", c.train.discount_factor},
        {"learn_rate", c.train.learn_rate},
        {"batch_size", c.train.batch_size},
        {"sequence_len", c.train.sequence_len},
        {"target_update_interval", c.train.target_update_interval},
        {"train_steps", c.train.train_steps},
        {"grad_clip", c.train.grad_clip},
        {"hidden", c.net.hidden},
        {"steps_per_input", c.net.steps_per_input},
        {"dt", c.net.dt},
        {"cell", c.net.cell == CellType::ltc ? "ltc" : "rnn"},
        {"fqe_max_iterations", c.fqe.max_iterations},
        {"fqe_tolerance", c.fqe.tolerance}}},
      {"meta",
       {{"inner_lr", c.meta.inner_lr},
        {"inner_steps", c.meta.inner_steps},
        {"meta_lr", c.meta.meta_lr},
        {"outer_steps", c.meta.outer_steps},
        {"support_fraction", c.meta.support_fraction},
        {"order", c.meta.order == MetaOrder::first ? "first" : "second"},
        {"adapt_steps", c.adapt_steps}}},
      {"eval",
       {{"horizon", c.eval.horizon},
        {"episodes", c.eval.episodes},
        {"methods", c.methods},
        {"effectiveness", c.effectiveness},
        {"adaptation_study", c.adaptation_study},
        {"reference_steps", c.reference_steps},
        {"adapt_max_steps", c.adapt_max_steps},
        {"adapt_eval_every", c.adapt_eval_every},
        {"adapt_patience", c.adapt_patience},
        {"adapt_fraction", c.adapt_fraction},
        {"tau_values", c.tau_values}}}};
  return j.dump(1) + "\n";
}

// ---------------------------------------------------------------------------
// manifest

std::string to_string(Stage s) {
  switch (s) {
    case Stage::collect: return "collect";
    case Stage::define_tasks: return "define-tasks";
    case Stage::meta_train: return "meta-train";
    case Stage::adapt: return "adapt";
    case Stage::eval: return "eval";
    case Stage::sweep_tau: return "sweep-tau";
    case Stage::report: return "report";
  }
  return "?";
}

Stage parse_stage(const std::string& name) {
  for (Stage s : {Stage::collect, Stage::define_tasks, Stage::meta_train, Stage::adapt, Stage::eval,
                  Stage::sweep_tau, Stage::report})
    if (to_string(s) == name) return s;
  throw InvalidConfig("unknown stage " + name);
}

std::string RunManifest::dump() const {
  json st = json::object();
  for (const auto& [name, r] : stages)
    st[name] = {{"inputs_hash", r.inputs_hash}, {"timestamp", r.timestamp}, {"artifacts", r.artifacts}};
  json j = {{"format", "metadvfs-manifest"},
            {"version", 1},
            {"tool_version", tool_version},
            {"clock", clock},
            {"config", json::parse(config.empty() ? "{}" : config)},
            {"stages", st},
            {"artifacts", artifacts}};
  return j.dump(1) + "\n";
}

RunManifest RunManifest::parse(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.value("format", "") != "metadvfs-manifest") throw ParseError("not a run manifest");
    RunManifest m;
    m.tool_version = j.at("tool_version").get<std::string>();
    m.clock = j.at("clock").get<long>();
    m.config = j.at("config").dump(1) + "\n";
    for (const auto& [name, r] : j.at("stages").items())
      m.stages[name] = {r.at("inputs_hash").get<std::string>(), r.at("timestamp").get<long>(),
                        r.at("artifacts").get<std::vector<std::string>>()};
    m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
}

void log_event(const std::string& stage, const std::string& event, const std::string& detail) {
  static std::mutex mutex;
  json j = {{"stage", stage}, {"event", event}};
  if (!detail.empty()) j["detail"] = detail;
  std::lock_guard lock(mutex);
  std::cerr << j.dump() << '\n';
}

// ---------------------------------------------------------------------------
// pipeline

Pipeline::Pipeline(RunConfig config, fs::path out_dir, int workers)
    : config_(std::move(config)), out_(std::move(out_dir)), workers_(std::max(1, workers)) {
  config_.validate();
  config_.eval.workers = workers_;
  const fs::path mf = out_ / "manifest.json";
  if (fs::exists(mf)) manifest_ = RunManifest::parse(read_text_file(mf));
  manifest_.tool_version = METADVFS_VERSION;
  manifest_.config = dump_run_config(config_);
}

std::vector<Stage> Pipeline::dependencies(Stage s) const {
  const bool learned = std::any_of(config_.methods.begin(), config_.methods.end(),
                                   [](const std::string& m) { return m != "schedutil"; });
  switch (s) {
    case Stage::collect: return {};
    case Stage::define_tasks: return {Stage::collect};
    case Stage::meta_train: return {Stage::define_tasks};
    case Stage::adapt: return {Stage::meta_train};
    case Stage::eval:
      if (learned || config_.adaptation_study) return {Stage::adapt};
      if (config_.effectiveness) return {Stage::define_tasks};
      return {Stage::collect};
    case Stage::sweep_tau: return {Stage::define_tasks};
    case Stage::report: return {Stage::eval};
  }
  return {};
}

std::string Pipeline::inputs_hash(Stage s) const {
  std::string text = to_string(s) + "\n" + manifest_.tool_version + "\n" + manifest_.config;
  if (s == Stage::collect) {
    text += read_text_file(config_.catalog);
    if (!config_.new_catalog.empty()) text += read_text_file(config_.new_catalog);
  }
  std::set<Stage> seen;
  std::vector<Stage> todo = dependencies(s);
  while (!todo.empty()) {
    const Stage d = todo.back();
    todo.pop_back();
    if (!seen.insert(d).second) continue;
    const auto it = manifest_.stages.find(to_string(d));
    if (it == manifest_.stages.end()) continue;
    for (const auto& a : it->second.artifacts) text += a + ":" + manifest_.artifacts.at(a) + "\n";
    for (Stage dd : dependencies(d)) todo.push_back(dd);
  }
  return content_hash(text);
}

bool Pipeline::up_to_date(Stage s, const std::string& hash) const {
  const auto it = manifest_.stages.find(to_string(s));
  if (it == manifest_.stages.end() || it->second.inputs_hash != hash) return false;
  for (const auto& a : it->second.artifacts) {
    const fs::path p = out_ / a;
    if (!fs::exists(p) || content_hash(read_text_file(p)) != manifest_.artifacts.at(a)) return false;
  }
  return true;
}

void Pipeline::commit(Stage s, const std::string& hash, const Files& files) {
  const std::string name = to_string(s);
  auto old = manifest_.stages.find(name);
  if (old != manifest_.stages.end()) {
    for (const auto& a : old->second.artifacts) {
      manifest_.artifacts.erase(a);
      fs::remove(out_ / a);
    }
  }
  StageRecord rec;
  rec.inputs_hash = hash;
  rec.timestamp = ++manifest_.clock;
  for (const auto& [rel, content] : files) {
    write_text_file(out_ / rel, content);
    manifest_.artifacts[rel] = content_hash(content);
    rec.artifacts.push_back(rel);
  }
  std::sort(rec.artifacts.begin(), rec.artifacts.end());
  manifest_.stages[name] = std::move(rec);
  write_text_file(out_ / "manifest.json", manifest_.dump());
}

StageResult Pipeline::run(Stage s) {
  const std::string name = to_string(s);
  for (Stage d : dependencies(s))
    if (!manifest_.stages.count(to_string(d)))
      throw MissingStage(name + " requires " + to_string(d));
  StageResult result;
  result.stage = s;
  const std::string hash = inputs_hash(s);
  if (up_to_date(s, hash)) {
    log_event(name, "skipped", "inputs unchanged");
    result.skipped = true;
    result.artifacts = manifest_.stages.at(name).artifacts;
    return result;
  }
  log_event(name, "start");
  Files files;
  switch (s) {
    case Stage::collect: files = do_collect(); break;
    case Stage::define_tasks: files = do_define_tasks(); break;
    case Stage::meta_train: files = do_meta_train(); break;
    case Stage::adapt: files = do_adapt(); break;
    case Stage::eval: files = do_eval(); break;
    case Stage::sweep_tau: files = do_sweep_tau(); break;
    case Stage::report: files = do_report(); break;
  }
  commit(s, hash, files);
  result.artifacts = manifest_.stages.at(name).artifacts;
  log_event(name, "done", std::to_string(files.size()) + " artifacts");
  return result;
}

std::vector<StageResult> Pipeline::run_all() {
  std::vector<StageResult> out;
  for (Stage s : {Stage::collect, Stage::define_tasks, Stage::meta_train, Stage::adapt, Stage::eval,
                  Stage::sweep_tau, Stage::report})
    out.push_back(run(s));
  return out;
}

// ---------------------------------------------------------------------------
// stage bodies

namespace {

const MetadataRecord& find_record(const std::vector<MetadataRecord>& all, const std::string& id, RecordKind kind) {
  for (const auto& r : all)
    if (r.id == id && r.kind == kind) return r;
  throw SchemaViolation("no " + to_string(kind) + " record " + id);
}

std::vector<ComboName> cross(const std::vector<MetadataRecord>& all) {
  std::vector<ComboName> out;
  for (const auto& d : devices_of(all))
    for (const auto& a : apps_of(all)) out.emplace_back(d.id, a.id);
  return out;
}

std::string name_of(const ComboName& c) { return c.first + "__" + c.second; }

// Run-directory view shared by the stages after collect.
struct RunData {
  std::vector<std::string> names, new_names;
  std::vector<EnvSpec> envs, new_envs;
  std::vector<CombinationData> inputs;
  std::vector<Dataset> supports;

  static RunData load(const fs::path& out) {
    RunData d;
    const json idx = json::parse(read_text_file(out / "combinations.json"));
    d.names = idx.at("train").get<std::vector<std::string>>();
    d.new_names = idx.at("new").get<std::vector<std::string>>();
    for (const auto& n : d.names) {
      d.envs.push_back(parse_env_spec(read_text_file(out / "envs" / (n + ".json"))));
      d.inputs.push_back({d.envs.back().combination, load_dataset(out / "data" / (n + ".jsonl"))});
    }
    for (const auto& n : d.new_names) {
      d.new_envs.push_back(parse_env_spec(read_text_file(out / "new" / "envs" / (n + ".json"))));
      d.supports.push_back(load_dataset(out / "new" / "data" / (n + ".jsonl")));
    }
    return d;
  }
};

QProtocol protocol_of(const RunConfig& c, int workers) {
  QProtocol p;
  p.train = c.train;
  p.net = c.net;
  p.fqe = c.fqe;
  p.seed = derive_seed(c.seed, "tasks");
  p.workers = workers;
  return p;
}

ForestConfig forest_config(const RunConfig& c) {
  ForestConfig f;
  f.tau_cap = c.tau_cap;
  f.delta = c.delta;
  return f;
}

std::string node_file(const std::string& dir, const std::vector<int>& members, const QEvaluator& eval) {
  return dir + "/" + content_hash(QEvaluator::member_key(members, eval.inputs())).substr(0, 16) + ".json";
}

// Loads every saved node evaluation; returns the keys it loaded.
std::set<std::string> load_nodes(QEvaluator& eval, const fs::path& out, const std::vector<std::string>& dirs) {
  std::set<std::string> keys;
  for (const auto& dir : dirs) {
    if (!fs::exists(out / dir)) continue;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(out / dir)) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto [members, result] = parse_node_evaluation(read_text_file(f), eval.inputs());
      keys.insert(QEvaluator::member_key(members, eval.inputs()));
      eval.insert(members, std::move(result));
    }
  }
  return keys;
}

// Node evaluations not among `known`, as artifacts under `dir`.
Files new_nodes(const QEvaluator& eval, const std::set<std::string>& known, const std::string& dir) {
  Files out;
  for (const auto& [members, result] : eval.cached()) {
    if (known.count(QEvaluator::member_key(members, eval.inputs()))) continue;
    out.emplace_back(node_file(dir, members, eval), dump_node_evaluation(members, *result, eval.inputs()));
  }
  return out;
}

const std::vector<std::string> kNodeDirs = {"nodes", "eval_nodes", "sweep_nodes"};

}  // namespace

Files Pipeline::do_collect() {
  const auto catalog = load_catalog(config_.catalog);
  std::vector<ComboName> train = config_.combinations.empty() ? cross(catalog) : config_.combinations;
  std::vector<MetadataRecord> new_catalog;
  std::vector<ComboName> fresh;
  if (!config_.new_catalog.empty()) {
    new_catalog = load_catalog(config_.new_catalog);
    fresh = config_.new_combinations.empty() ? cross(new_catalog) : config_.new_combinations;
    std::set<std::string> trained;
    for (const auto& c : train) trained.insert(name_of(c));
    fresh.erase(std::remove_if(fresh.begin(), fresh.end(), [&](const ComboName& c) { return trained.count(name_of(c)) > 0; }),
                fresh.end());
  }

  struct Job {
    ComboName combo;
    bool is_new;
  };
  std::vector<Job> jobs;
  for (const auto& c : train) jobs.push_back({c, false});
  for (const auto& c : fresh) jobs.push_back({c, true});
  std::vector<Files> parts(jobs.size());
  parallel_for(jobs.size(), workers_, [&](std::size_t i) {
    const auto& [combo, is_new] = jobs[i];
    const auto& cat = is_new ? new_catalog : catalog;
    const std::string name = name_of(combo);
    const EnvSpec spec = generate_env(find_record(cat, combo.first, RecordKind::device),
                                      find_record(cat, combo.second, RecordKind::application),
                                      derive_seed(config_.seed, "env." + name));
    CollectConfig cc;
    cc.epsilon = config_.collect_epsilon;
    const int samples = is_new ? config_.support_samples : config_.samples_per_combination;
    cc.episodes = is_new ? 1 : config_.episodes_per_combination;
    cc.horizon = samples / cc.episodes;
    const Dataset data = collect_dataset(spec, cc, derive_seed(config_.seed, (is_new ? "collect.new." : "collect.") + name));
    const std::string dir = is_new ? "new/" : "";
    parts[i] = {{dir + "envs/" + name + ".json", dump_env_spec(spec)}, {dir + "data/" + name + ".jsonl", dump_dataset(data)}};
  });
  Files out;
  for (auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  json idx = {{"train", json::array()}, {"new", json::array()}};
  for (const auto& c : train) idx["train"].push_back(name_of(c));
  for (const auto& c : fresh) idx["new"].push_back(name_of(c));
  out.emplace_back("combinations.json", idx.dump(1) + "\n");
  return out;
}

Files Pipeline::do_define_tasks() {
  RunData d = RunData::load(out_);
  QEvaluator eval(d.inputs, protocol_of(config_, workers_));
  std::vector<MergeTraceEntry> trace;
  const TaskForest forest = build_forest(eval, forest_config(config_), &trace);
  Files out = new_nodes(eval, {}, "nodes");
  out.emplace_back("forest.json", dump_forest(forest, eval));
  out.emplace_back("trace.jsonl", dump_trace(trace));
  return out;
}

Files Pipeline::do_meta_train() {
  RunData d = RunData::load(out_);
  QEvaluator eval(d.inputs, protocol_of(config_, workers_));
  load_nodes(eval, out_, {"nodes"});
  const TaskForest forest = parse_forest(read_text_file(out_ / "forest.json"), d.inputs);
  std::vector<Files> parts(forest.roots.size());
  parallel_for(forest.roots.size(), workers_, [&](std::size_t i) {
    const TaskNode& root = forest.node(forest.roots[i]);
    const MetaModel m = meta_train(root, eval, config_.meta, derive_seed(config_.seed, "meta." + task_id(root)));
    parts[i] = {{"meta/" + m.task_id + ".json", dump_meta_model(m)}};
  });
  Files out;
  for (auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

namespace {

std::map<std::string, MetaModel> load_meta(const fs::path& out, const TaskForest& forest) {
  std::map<std::string, MetaModel> metas;
  for (int r : forest.roots) {
    const std::string id = task_id(forest.node(r));
    metas.emplace(id, parse_meta_model(read_text_file(out / "meta" / (id + ".json"))));
  }
  return metas;
}

AdaptConfig adapt_config(const RunConfig& c, const std::string& purpose) {
  AdaptConfig a;
  a.steps = c.adapt_steps;
  a.seed = derive_seed(c.seed, purpose);
  return a;
}

}  // namespace

Files Pipeline::do_adapt() {
  RunData d = RunData::load(out_);
  const TaskForest forest = parse_forest(read_text_file(out_ / "forest.json"), d.inputs);
  const auto metas = load_meta(out_, forest);
  std::vector<Files> parts(d.new_envs.size());
  std::vector<json> picks(d.new_envs.size());
  parallel_for(d.new_envs.size(), workers_, [&](std::size_t i) {
    const std::string& name = d.new_names[i];
    const TaskSelection sel = select_task(d.new_envs[i].combination, forest);
    const AdaptedModel a = fast_adapt(metas.at(sel.task_id), d.supports[i], adapt_config(config_, "adapt." + name));
    picks[i] = {{"combination", name}, {"task_id", sel.task_id}, {"overlap", sel.overlap}, {"fallback", sel.fallback}};
    parts[i] = {{"adapted/" + name + ".json", dump_adapted_model(a)}};
  });
  Files out;
  for (auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  out.emplace_back("selection.json", json(picks).dump(1) + "\n");
  return out;
}

Files Pipeline::do_eval() {
  RunData d = RunData::load(out_);
  const bool have_forest = manifest_.stages.count(to_string(Stage::define_tasks)) > 0;
  const bool have_meta = manifest_.stages.count(to_string(Stage::adapt)) > 0;
  QEvaluator eval(d.inputs, protocol_of(config_, workers_));
  std::set<std::string> known;
  TaskForest forest;
  std::map<std::string, MetaModel> metas;
  if (have_forest) {
    known = load_nodes(eval, out_, kNodeDirs);
    forest = parse_forest(read_text_file(out_ / "forest.json"), d.inputs);
  }
  if (have_meta) metas = load_meta(out_, forest);

  std::vector<EnvSpec> envs = d.envs;
  envs.insert(envs.end(), d.new_envs.begin(), d.new_envs.end());
  const std::size_t n_train = d.envs.size();
  auto data_of = [&](std::size_t e) -> const Dataset& {
    return e < n_train ? d.inputs[e].data : d.supports[e - n_train];
  };
  auto root_members = [&](std::size_t e) -> std::vector<int> {
    if (e < n_train) {
      for (int r : forest.roots) {
        const auto& m = forest.node(r).members;
        if (std::find(m.begin(), m.end(), static_cast<int>(e)) != m.end()) return m;
      }
    }
    return forest.node(select_task(envs[e].combination, forest).root).members;
  };
  auto task_of = [&](std::size_t e) {
    if (e < n_train) {
      for (int r : forest.roots) {
        const auto& m = forest.node(r).members;
        if (std::find(m.begin(), m.end(), static_cast<int>(e)) != m.end()) return task_id(forest.node(r));
      }
    }
    return select_task(envs[e].combination, forest).task_id;
  };

  // Shared starting points of the ablations.
  std::map<std::string, MetaModel> wo_clu, wo_lnn;
  const auto uses = [&](const std::string& m) {
    return std::find(config_.methods.begin(), config_.methods.end(), m) != config_.methods.end();
  };
  if (uses("wo_clu")) {
    std::map<std::string, std::vector<int>> groups;
    for (std::size_t i = 0; i < n_train; ++i) groups[d.inputs[i].data.shape_signature()].push_back(static_cast<int>(i));
    std::vector<std::vector<int>> sets;
    for (const auto& [sig, g] : groups) sets.push_back(g);
    eval.evaluate_all(sets);
    for (const auto& [sig, g] : groups) {
      std::vector<const CombinationData*> members;
      for (int m : g) members.push_back(&d.inputs[static_cast<std::size_t>(m)]);
      wo_clu.emplace(sig, meta_train("global", eval.evaluate(g).network, members, config_.meta,
                                     derive_seed(config_.seed, "wo_clu." + sig)));
    }
  }
  if (uses("wo_lnn")) {
    QNetConfig rnn = config_.net;
    rnn.cell = CellType::rnn;
    std::vector<MetaModel> models(forest.roots.size());
    parallel_for(forest.roots.size(), workers_, [&](std::size_t i) {
      const TaskNode& root = forest.node(forest.roots[i]);
      std::vector<const CombinationData*> members;
      for (int m : root.members) members.push_back(&d.inputs[static_cast<std::size_t>(m)]);
      const std::string id = task_id(root);
      const QNetwork init = train_on_dataset(eval.merged_data(root.members), config_.train, rnn,
                                             derive_seed(config_.seed, "wo_lnn.train." + id));
      models[i] = meta_train(id, init, members, config_.meta, derive_seed(config_.seed, "wo_lnn.meta." + id));
    });
    for (auto& m : models) wo_lnn.emplace(m.task_id, std::move(m));
  }

  // One network per (learned method, environment).
  std::vector<std::string> learned;
  for (const auto& m : config_.methods)
    if (m != "schedutil") learned.push_back(m);
  std::vector<QNetwork> nets(learned.size() * envs.size());
  parallel_for(nets.size(), workers_, [&](std::size_t cell) {
    const std::string& method = learned[cell / envs.size()];
    const std::size_t e = cell % envs.size();
    const std::string name = envs[e].combination.name();
    const Dataset& data = data_of(e);
    const std::string purpose = "eval." + method + "." + name;
    if (method == "plain_dqn") {
      nets[cell] = train_on_dataset(data, config_.train, config_.net, derive_seed(config_.seed, purpose));
    } else if (method == "metadvfs") {
      if (e >= n_train) {
        nets[cell] = parse_adapted_model(read_text_file(out_ / "adapted" / (name + ".json"))).network;
      } else {
        nets[cell] = fast_adapt(metas.at(task_of(e)), data, adapt_config(config_, purpose)).network;
      }
    } else if (method == "wo_maml") {
      MetaModel plain;
      plain.task_id = task_of(e);
      plain.config = config_.meta;
      plain.network = eval.evaluate(root_members(e)).network;
      nets[cell] = fast_adapt(plain, data, adapt_config(config_, purpose)).network;
    } else if (method == "wo_clu") {
      auto it = wo_clu.find(data.shape_signature());
      if (it == wo_clu.end()) throw MissingArtifact("no global model for the shape of " + name);
      nets[cell] = fast_adapt(it->second, data, adapt_config(config_, purpose)).network;
    } else if (method == "wo_lnn") {
      nets[cell] = fast_adapt(wo_lnn.at(task_of(e)), data, adapt_config(config_, purpose)).network;
    }
  });

  std::vector<std::pair<std::string, PolicyFactory>> methods;
  for (const auto& m : config_.methods) {
    if (m == "schedutil") {
      methods.emplace_back(m, [](const EnvSpec& s) { return std::make_shared<SchedutilPolicy>(s); });
      continue;
    }
    const std::size_t k = static_cast<std::size_t>(std::find(learned.begin(), learned.end(), m) - learned.begin());
    methods.emplace_back(m, [&, k](const EnvSpec& s) -> std::shared_ptr<Policy> {
      for (std::size_t e = 0; e < envs.size(); ++e)
        if (envs[e].combination.name() == s.combination.name())
          return std::make_shared<QPolicy>(nets[k * envs.size() + e]);
      return nullptr;
    });
  }
  EvalProtocol protocol = config_.eval;
  protocol.seed = derive_seed(config_.seed, "eval");
  protocol.workers = workers_;
  const auto rows = compare_methods(envs, methods, protocol);

  Files out;
  out.emplace_back("reports/comparison.csv", comparison_csv(rows));
  if (!envs.empty()) {
    out.emplace_back("reports/same_device.csv", comparison_csv(same_device(rows, envs.front().combination.device_id)));
    out.emplace_back("reports/same_app.csv", comparison_csv(same_app(rows, envs.front().combination.app_id)));
  }
  out.emplace_back("reports/cross_summary.csv", comparison_csv(cross_summary(rows)));

  SeedManifest seeds;
  seeds.seeds["root"] = config_.seed;
  seeds.seeds["eval"] = protocol.seed;
  seeds.seeds["tasks"] = derive_seed(config_.seed, "tasks");
  for (const auto& e : envs) {
    const auto s = eval_seeds(protocol.seed, e.combination, protocol.episodes);
    for (std::size_t i = 0; i < s.size(); ++i) seeds.seeds["eval." + e.combination.name() + "." + std::to_string(i)] = s[i];
  }

  if (have_forest && config_.effectiveness) {
    const auto cells = effectiveness_analysis(eval, forest);
    out.emplace_back("reports/effectiveness.csv", effectiveness_csv(cells));
  }
  if (have_meta && config_.adaptation_study && !d.new_envs.empty()) {
    AdaptationConfig ac;
    ac.train = config_.train;
    ac.net = config_.net;
    ac.reference_steps = config_.reference_steps;
    ac.max_steps = config_.adapt_max_steps;
    ac.eval_every = config_.adapt_eval_every;
    ac.patience = config_.adapt_patience;
    ac.fraction = config_.adapt_fraction;
    ac.eval = protocol;
    const auto study = adaptation_time_study(d.new_envs, d.supports, forest, metas, ac);
    out.emplace_back("reports/adaptation.csv", adaptation_csv(study));
    json s = {{"non_converged", study.non_converged},
              {"meta_median", study.meta_median},
              {"baseline_median", study.baseline_median},
              {"median_ratio", study.median_ratio},
              {"meta_mean", study.meta_mean},
              {"meta_sd", study.meta_sd},
              {"baseline_mean", study.baseline_mean},
              {"baseline_sd", study.baseline_sd}};
    out.emplace_back("reports/adaptation_summary.json", s.dump(1) + "\n");
  }
  out.emplace_back("reports/seeds.json", seeds.dump());
  out.emplace_back("reports/header.json", report_header());
  if (have_forest) {
    const Files extra = new_nodes(eval, known, "eval_nodes");
    out.insert(out.end(), extra.begin(), extra.end());
  }
  return out;
}

Files Pipeline::do_sweep_tau() {
  RunData d = RunData::load(out_);
  QEvaluator eval(d.inputs, protocol_of(config_, workers_));
  const auto known = load_nodes(eval, out_, {"nodes", "eval_nodes"});
  std::vector<int> taus;
  for (int t : config_.tau_values) taus.push_back(t == 0 ? static_cast<int>(d.inputs.size()) : t);
  const auto points = tau_sweep(eval, taus, forest_config(config_));
  Files out = new_nodes(eval, known, "sweep_nodes");
  out.emplace_back("reports/tau_sweep.csv", sweep_csv(points));
  return out;
}

Files Pipeline::do_report() {
  json summary = json::object();
  summary["header"] = json::parse(report_header());
  json stages = json::object();
  for (const auto& [name, r] : manifest_.stages) stages[name] = r.timestamp;
  summary["stages"] = stages;
  json reports = json::object();
  for (const auto& [path, hash] : manifest_.artifacts)
    if (path.rfind("reports/", 0) == 0) reports[path] = hash;
  summary["reports"] = reports;
  return {{"reports/summary.json", summary.dump(1) + "\n"}};
}

}  // namespace metadvfs

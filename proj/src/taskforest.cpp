#include "metadvfs/taskforest.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace metadvfs {

QEvaluator::QEvaluator(std::vector<CombinationData> inputs, QProtocol protocol)
    : inputs_(std::move(inputs)), protocol_(std::move(protocol)) {
  if (inputs_.empty()) throw InvalidConfig("task forest needs at least one dataset");
  for (const auto& in : inputs_)
    if (in.data.empty()) throw InvalidConfig("empty dataset for " + in.key.name());
}

std::string QEvaluator::member_key(const std::vector<int>& members,
                                   const std::vector<CombinationData>& inputs) {
  std::vector<std::string> names;
  for (int m : members) names.push_back(inputs[static_cast<std::size_t>(m)].key.name());
  std::sort(names.begin(), names.end());
  std::string key;
  for (const auto& n : names) {
    if (!key.empty()) key += '+';
    key += n;
  }
  return key;
}

Dataset QEvaluator::merged_data(const std::vector<int>& members) const {
  std::vector<int> sorted = members;
  std::sort(sorted.begin(), sorted.end());
  std::vector<const Dataset*> parts;
  for (int m : sorted) parts.push_back(&inputs_[static_cast<std::size_t>(m)].data);
  return concat(parts);
}

NodeEvaluation QEvaluator::compute(const std::vector<int>& members) const {
  const std::string key = member_key(members, inputs_);
  NodeEvaluation out;
  out.network = train_on_dataset(merged_data(members), protocol_.train, protocol_.net,
                                 derive_seed(protocol_.seed, "train:" + key));
  const std::uint64_t fqe_seed = derive_seed(protocol_.seed, "fqe");
  for (int m : members) {
    const auto est = fqe_q_value(out.network, inputs_[static_cast<std::size_t>(m)].data,
                                 protocol_.train, fqe_seed, protocol_.fqe);
    out.member_estimates.push_back(est);
    out.member_q.push_back(est.value);
  }
  double total = 0;
  for (double q : out.member_q) total += q;
  out.q = total / static_cast<double>(out.member_q.size());
  return out;
}

const NodeEvaluation& QEvaluator::evaluate(const std::vector<int>& members) {
  std::vector<int> sorted = members;
  std::sort(sorted.begin(), sorted.end());
  const std::string key = member_key(sorted, inputs_);
  {
    std::lock_guard lock(mutex_);
    auto it = cache_.find(key);
    if (it != cache_.end()) return *it->second;
  }
  auto result = std::make_shared<const NodeEvaluation>(compute(sorted));
  std::lock_guard lock(mutex_);
  return *cache_.emplace(key, std::move(result)).first->second;
}

void QEvaluator::evaluate_all(const std::vector<std::vector<int>>& sets) {
  std::vector<std::vector<int>> missing;
  std::set<std::string> seen;
  {
    std::lock_guard lock(mutex_);
    for (auto s : sets) {
      std::sort(s.begin(), s.end());
      const std::string key = member_key(s, inputs_);
      if (!cache_.count(key) && seen.insert(key).second) missing.push_back(s);
    }
  }
  parallel_for(missing.size(), protocol_.workers, [&](std::size_t i) { evaluate(missing[i]); });
}

std::vector<std::pair<std::vector<int>, std::shared_ptr<const NodeEvaluation>>> QEvaluator::cached() const {
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < inputs_.size(); ++i) index[inputs_[i].key.name()] = static_cast<int>(i);
  std::lock_guard lock(mutex_);
  std::vector<std::pair<std::vector<int>, std::shared_ptr<const NodeEvaluation>>> out;
  for (const auto& [key, value] : cache_) {
    std::vector<int> members;
    std::size_t begin = 0;
    for (;;) {
      const std::size_t end = key.find('+', begin);
      members.push_back(index.at(key.substr(begin, end - begin)));
      if (end == std::string::npos) break;
      begin = end + 1;
    }
    std::sort(members.begin(), members.end());
    out.emplace_back(std::move(members), value);
  }
  return out;
}

void QEvaluator::insert(const std::vector<int>& members, NodeEvaluation result) {
  std::vector<int> sorted = members;
  std::sort(sorted.begin(), sorted.end());
  if (result.member_q.size() != sorted.size()) throw InvalidConfig("node evaluation does not match its members");
  const std::string key = member_key(sorted, inputs_);
  std::lock_guard lock(mutex_);
  cache_[key] = std::make_shared<const NodeEvaluation>(std::move(result));
}

std::size_t QEvaluator::evaluations() const {
  std::lock_guard lock(mutex_);
  return cache_.size();
}

// ---------------------------------------------------------------------------

std::vector<std::vector<int>> TaskForest::partition() const {
  std::vector<std::vector<int>> out;
  for (int r : roots) out.push_back(node(r).members);
  return out;
}

std::string task_id(const TaskNode& node) { return "task" + std::to_string(node.id); }

namespace {

void sort_roots(TaskForest& f) {
  std::stable_sort(f.roots.begin(), f.roots.end(), [&](int a, int b) {
    if (f.node(a).q != f.node(b).q) return f.node(a).q < f.node(b).q;
    return a < b;
  });
}

std::vector<int> union_members(const TaskNode& a, const TaskNode& b) {
  std::vector<int> out = a.members;
  out.insert(out.end(), b.members.begin(), b.members.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

TaskForest init_forest(QEvaluator& eval, const ForestConfig& config) {
  if (config.tau_cap < 1) throw InvalidConfig("tau_cap must be >= 1");
  TaskForest f;
  f.config = config;
  const int n = static_cast<int>(eval.inputs().size());
  std::vector<std::vector<int>> singles;
  for (int i = 0; i < n; ++i) singles.push_back({i});
  eval.evaluate_all(singles);
  for (int i = 0; i < n; ++i) {
    TaskNode node;
    node.id = i;
    node.k = eval.inputs()[static_cast<std::size_t>(i)].key.merged_attributes;
    node.members = {i};
    node.q = eval.evaluate({i}).q;
    f.nodes.push_back(node);
    f.roots.push_back(i);
  }
  sort_roots(f);
  return f;
}

std::vector<int> find_candidates(const TaskForest& forest, const QEvaluator& eval, int target) {
  const TaskNode& t = forest.node(target);
  const auto shape = eval.inputs()[static_cast<std::size_t>(t.members.front())].data.shape_signature();
  std::vector<int> out;
  for (int r : forest.roots) {
    if (r == target) continue;
    const TaskNode& c = forest.node(r);
    if (shared_attributes(t.k, c.k, forest.config.match_keys).empty()) continue;
    if (eval.inputs()[static_cast<std::size_t>(c.members.front())].data.shape_signature() != shape) continue;
    if (static_cast<int>(union_members(t, c).size()) > forest.config.tau_cap) continue;
    out.push_back(r);
  }
  return out;
}

MergeProposal evaluate_merge(const TaskForest& forest, QEvaluator& eval, int target, int candidate) {
  MergeProposal p;
  p.candidate = candidate;
  p.members = union_members(forest.node(target), forest.node(candidate));
  p.q_combined = eval.evaluate(p.members).q;
  return p;
}

MergeTraceEntry update_forest(TaskForest& forest, int target, const MergeProposal& best) {
  MergeTraceEntry e;
  e.target = target;
  TaskNode& t = forest.node(target);
  if (best.candidate < 0) {
    t.processed = true;
    e.q_before = t.q;
    e.q_combined = t.q;
    e.threshold = t.q;
    return e;
  }
  const TaskNode& c = forest.node(best.candidate);
  e.candidate = best.candidate;
  e.q_combined = best.q_combined;
  if (forest.config.baseline == MergeBaseline::weighted) {
    const double nt = static_cast<double>(t.members.size());
    const double nc = static_cast<double>(c.members.size());
    e.q_before = (nt * t.q + nc * c.q) / (nt + nc);
  } else {
    e.q_before = t.q;
  }
  e.threshold = e.q_before + forest.config.delta * std::abs(e.q_before);
  e.accepted = e.q_combined > e.threshold && e.q_combined > e.q_before;

  if (e.accepted) {
    TaskNode parent;
    parent.id = static_cast<int>(forest.nodes.size());
    parent.k = shared_attributes(t.k, c.k);
    parent.members = best.members;
    parent.q = best.q_combined;
    parent.children = {target, best.candidate};
    const int cand = best.candidate;
    forest.nodes.push_back(std::move(parent));
    forest.roots.erase(std::remove_if(forest.roots.begin(), forest.roots.end(),
                                      [&](int r) { return r == target || r == cand; }),
                       forest.roots.end());
    forest.roots.push_back(static_cast<int>(forest.nodes.size()) - 1);
  } else if (forest.config.else_branch == ElseBranch::literal) {
    t.q = best.q_combined;
    for (int m : c.members) t.absorbed.push_back(m);
    t.processed = true;
  } else {
    // a tie absorbs nothing observable; anything else is a plain rejection
    t.processed = true;
  }
  sort_roots(forest);
  return e;
}

TaskForest build_forest(QEvaluator& eval, const ForestConfig& config,
                        std::vector<MergeTraceEntry>* trace) {
  TaskForest f = init_forest(eval, config);
  std::vector<MergeTraceEntry> log;
  for (;;) {
    int target = -1;
    for (int r : f.roots)
      if (!f.node(r).processed) {
        target = r;
        break;
      }
    if (target < 0) break;
    auto cands = find_candidates(f, eval, target);
    if (config.greedy_first_k > 0 && static_cast<int>(cands.size()) > config.greedy_first_k)
      cands.resize(static_cast<std::size_t>(config.greedy_first_k));
    std::vector<std::vector<int>> sets;
    for (int c : cands) sets.push_back(union_members(f.node(target), f.node(c)));
    eval.evaluate_all(sets);
    MergeProposal best;
    for (int c : cands) {
      const MergeProposal p = evaluate_merge(f, eval, target, c);
      if (best.candidate < 0 || p.q_combined > best.q_combined) best = p;
    }
    MergeTraceEntry e = update_forest(f, target, best);
    e.candidates_evaluated = static_cast<int>(cands.size());
    log.push_back(e);
  }
  if (trace) *trace = std::move(log);
  return f;
}

// ---------------------------------------------------------------------------

std::string dump_forest(const TaskForest& forest, const QEvaluator& eval) {
  nlohmann::json nodes = nlohmann::json::array();
  auto names = [&](const std::vector<int>& ms) {
    std::vector<std::string> out;
    for (int m : ms) out.push_back(eval.inputs()[static_cast<std::size_t>(m)].key.name());
    return out;
  };
  for (const auto& n : forest.nodes) {
    nlohmann::json k = nlohmann::json::object();
    for (const auto& [key, value] : n.k) k[key] = value;
    nodes.push_back({{"id", n.id},
                     {"task_id", task_id(n)},
                     {"k", k},
                     {"members", names(n.members)},
                     {"q", n.q},
                     {"children", n.children},
                     {"processed", n.processed},
                     {"absorbed", names(n.absorbed)}});
  }
  nlohmann::json doc = {{"format", "metadvfs-forest"},
                        {"version", 1},
                        {"tau_cap", forest.config.tau_cap},
                        {"delta", forest.config.delta},
                        {"nodes", nodes},
                        {"roots", forest.roots}};
  return doc.dump(2) + "\n";
}

TaskForest parse_forest(const std::string& text, const std::vector<CombinationData>& inputs) {
  TaskForest f;
  try {
    const auto doc = nlohmann::json::parse(text);
    if (doc.value("format", "") != "metadvfs-forest") throw ParseError("not a metadvfs forest");
    f.config.tau_cap = doc.at("tau_cap").get<int>();
    f.config.delta = doc.at("delta").get<double>();
    std::map<std::string, int> index;
    for (std::size_t i = 0; i < inputs.size(); ++i) index[inputs[i].key.name()] = static_cast<int>(i);
    auto lookup = [&](const nlohmann::json& arr) {
      std::vector<int> out;
      for (const auto& name : arr) {
        auto it = index.find(name.get<std::string>());
        if (it == index.end()) throw MissingArtifact("forest member " + name.get<std::string>());
        out.push_back(it->second);
      }
      return out;
    };
    for (const auto& j : doc.at("nodes")) {
      TaskNode n;
      n.id = j.at("id").get<int>();
      for (const auto& [key, value] : j.at("k").items()) n.k[key] = value.get<std::string>();
      n.members = lookup(j.at("members"));
      n.q = j.at("q").get<double>();
      n.children = j.at("children").get<std::vector<int>>();
      n.processed = j.at("processed").get<bool>();
      n.absorbed = lookup(j.at("absorbed"));
      if (n.id != static_cast<int>(f.nodes.size())) throw ParseError("forest node ids out of order");
      f.nodes.push_back(std::move(n));
    }
    f.roots = doc.at("roots").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what());
  }
  return f;
}

std::string dump_node_evaluation(const std::vector<int>& members, const NodeEvaluation& e,
                                 const std::vector<CombinationData>& inputs) {
  nlohmann::json est = nlohmann::json::array();
  for (const auto& m : e.member_estimates)
    est.push_back({{"value", hexfloat(m.value)},
                   {"n_states", m.n_states},
                   {"seed", m.seed},
                   {"converged", m.converged},
                   {"iterations", m.iterations},
                   {"residual", hexfloat(m.residual)}});
  nlohmann::json names = nlohmann::json::array();
  for (int m : members) names.push_back(inputs.at(static_cast<std::size_t>(m)).key.name());
  nlohmann::json doc = {{"format", "metadvfs-node"},
                        {"version", 1},
                        {"members", names},
                        {"q", hexfloat(e.q)},
                        {"estimates", est},
                        {"network", dump_qnetwork(e.network)}};
  return doc.dump(1) + "\n";
}

std::pair<std::vector<int>, NodeEvaluation> parse_node_evaluation(const std::string& text,
                                                                  const std::vector<CombinationData>& inputs) {
  try {
    const auto doc = nlohmann::json::parse(text);
    if (doc.value("format", "") != "metadvfs-node") throw ParseError("not a node checkpoint");
    std::map<std::string, int> index;
    for (std::size_t i = 0; i < inputs.size(); ++i) index[inputs[i].key.name()] = static_cast<int>(i);
    std::vector<int> members;
    for (const auto& n : doc.at("members")) {
      auto it = index.find(n.get<std::string>());
      if (it == index.end()) throw MissingArtifact("node member " + n.get<std::string>());
      members.push_back(it->second);
    }
    NodeEvaluation e;
    e.q = parse_hexfloat(doc.at("q").get<std::string>());
    for (const auto& j : doc.at("estimates")) {
      QEstimate m;
      m.value = parse_hexfloat(j.at("value").get<std::string>());
      m.n_states = j.at("n_states").get<int>();
      m.seed = j.at("seed").get<std::uint64_t>();
      m.converged = j.at("converged").get<bool>();
      m.iterations = j.at("iterations").get<int>();
      m.residual = parse_hexfloat(j.at("residual").get<std::string>());
      e.member_estimates.push_back(m);
      e.member_q.push_back(m.value);
    }
    e.network = parse_qnetwork(doc.at("network").get<std::string>());
    return {members, std::move(e)};
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(std::string("node checkpoint: ") + ex.what());
  }
}

std::string dump_trace(const std::vector<MergeTraceEntry>& trace) {
  std::string out;
  for (const auto& e : trace) {
    nlohmann::json j = {{"target", e.target},
                        {"candidate", e.candidate},
                        {"q_before", e.q_before},
                        {"q_combined", e.q_combined},
                        {"threshold", e.threshold},
                        {"accepted", e.accepted},
                        {"candidates_evaluated", e.candidates_evaluated}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace metadvfs

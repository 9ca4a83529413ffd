#include "metadvfs/maml.hpp"

#include <algorithm>
#include <tuple>

#include <nlohmann/json.hpp>

namespace metadvfs {

void MetaConfig::validate() const {
  if (inner_lr < 0) throw InvalidConfig("inner_lr must be >= 0");
  if (inner_steps < 0) throw InvalidConfig("inner_steps must be >= 0");
  if (meta_lr <= 0) throw InvalidConfig("meta_lr must be positive");
  if (outer_steps < 0) throw InvalidConfig("outer_steps must be >= 0");
  if (support_fraction <= 0 || support_fraction >= 1)
    throw InvalidConfig("support_fraction must be in (0, 1)");
  if (hvp_epsilon <= 0) throw InvalidConfig("hvp_epsilon must be positive");
  if (batch_size < 1 || sequence_len < 1) throw InvalidConfig("batch_size and sequence_len must be >= 1");
  if (discount_factor < 0 || discount_factor >= 1) throw InvalidConfig("discount_factor must be in [0, 1)");
  if (target_update_interval < 0) throw InvalidConfig("target_update_interval must be >= 0");
}

Vector MetaObjective::support_hvp(int member, int inner_step, const Vector& theta, const Vector& v,
                                  double epsilon) {
  const double norm = v.norm();
  if (norm == 0) return Vector::Zero(theta.size());
  const double h = epsilon / norm;
  Vector gp, gm;
  support_loss(member, inner_step, theta + h * v, &gp);
  support_loss(member, inner_step, theta - h * v, &gm);
  return (gp - gm) / (2 * h);
}

Vector inner_adapt(MetaObjective& obj, int member, const Vector& theta, double alpha, int steps,
                   std::vector<Vector>* path) {
  Vector t = theta;
  if (path) path->assign(1, t);
  for (int k = 0; k < steps; ++k) {
    Vector g;
    obj.support_loss(member, k, t, &g);
    t -= alpha * g;
    if (path) path->push_back(t);
  }
  return t;
}

MetaStep meta_gradient(MetaObjective& obj, const Vector& theta, const MetaConfig& config) {
  const int n = obj.members();
  if (n < 1) throw InvalidConfig("meta objective has no members");
  MetaStep out;
  out.gradient = Vector::Zero(theta.size());
  for (int i = 0; i < n; ++i) {
    std::vector<Vector> path;
    Vector adapted = inner_adapt(obj, i, theta, config.inner_lr, config.inner_steps, &path);
    Vector g;
    out.query_loss += obj.query_loss(i, adapted, &g);
    if (config.order == MetaOrder::second) {
      for (int k = config.inner_steps - 1; k >= 0; --k)
        g -= config.inner_lr * obj.support_hvp(i, k, path[static_cast<std::size_t>(k)], g, config.hvp_epsilon);
    }
    out.gradient += g;
    out.adapted.push_back(std::move(adapted));
  }
  out.gradient /= n;
  out.query_loss /= n;
  return out;
}

Vector meta_optimize(MetaObjective& obj, Vector theta, const MetaConfig& config, std::uint64_t seed,
                     std::vector<double>* losses, const OuterHook& before_step) {
  config.validate();
  Rng rng(derive_seed(seed, "meta-batches"));
  Adam adam(config.meta_lr);
  for (int step = 0; step < config.outer_steps; ++step) {
    if (before_step) before_step(step, theta);
    obj.prepare(rng);
    MetaStep ms = meta_gradient(obj, theta, config);
    clip_norm(ms.gradient, config.grad_clip);
    if (config.optimizer == MetaOptimizer::adam)
      adam.step(theta, ms.gradient);
    else
      theta -= config.meta_lr * ms.gradient;
    if (losses) losses->push_back(ms.query_loss);
  }
  return theta;
}

SupportQuerySplit split_support_query(const Dataset& data, double support_fraction) {
  auto [support, query] = split_episodes(data, support_fraction);
  if (support.empty() || query.empty()) throw InvalidConfig("support/query split leaves an empty side");
  return {std::move(support), std::move(query)};
}

// ---------------------------------------------------------------------------
// TD objective

TdMetaObjective::TdMetaObjective(QNetwork shape, std::vector<SupportQuerySplit> splits,
                                 const MetaConfig& config)
    : shape_(std::move(shape)), target_(shape_), splits_(std::move(splits)), config_(config) {
  config_.validate();
  for (const auto& s : splits_) {
    for (const Dataset* d : {&s.support, &s.query}) {
      if (d->state_dim != shape_.state_dim() || d->branch_sizes != shape_.branch_sizes())
        throw ArityMismatch("member data shape differs from the meta-model");
    }
    support_mem_.emplace_back(s.support.size());
    support_mem_.back().push_all(s.support);
    query_mem_.emplace_back(s.query.size());
    query_mem_.back().push_all(s.query);
  }
}

void TdMetaObjective::prepare(Rng& rng) {
  const std::size_t n = splits_.size();
  support_batches_.assign(n, {});
  query_batches_.assign(n, {});
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < config_.inner_steps; ++k) {
      const auto pos = support_mem_[i].sample(config_.batch_size, rng);
      support_batches_[i].push_back(make_batch(shape_.normalizer, support_mem_[i], pos, config_.sequence_len));
    }
    const auto pos = query_mem_[i].sample(config_.batch_size, rng);
    query_batches_[i] = make_batch(shape_.normalizer, query_mem_[i], pos, config_.sequence_len);
  }
}

void TdMetaObjective::set_target(const Vector& theta) { target_.net.set_params(theta); }

double TdMetaObjective::loss(const SequenceBatch& batch, const Vector& theta, Vector* grad) {
  QNetwork q = shape_;
  q.net.set_params(theta);
  return td_loss(q, target_, batch, config_.discount_factor, grad);
}

double TdMetaObjective::support_loss(int member, int inner_step, const Vector& theta, Vector* grad) {
  const auto& b = support_batches_.at(static_cast<std::size_t>(member));
  if (b.empty()) throw InvalidConfig("prepare() must run before support_loss");
  return loss(b.at(static_cast<std::size_t>(inner_step)), theta, grad);
}

double TdMetaObjective::query_loss(int member, const Vector& theta, Vector* grad) {
  if (query_batches_.empty()) throw InvalidConfig("prepare() must run before query_loss");
  return loss(query_batches_.at(static_cast<std::size_t>(member)), theta, grad);
}

// ---------------------------------------------------------------------------
// meta-models

MetaModel meta_train(const std::string& task_id, const QNetwork& init,
                     const std::vector<const CombinationData*>& members, const MetaConfig& config,
                     std::uint64_t seed) {
  config.validate();
  if (members.empty()) throw InvalidConfig("task has no members");
  std::vector<SupportQuerySplit> splits;
  MetaModel out;
  out.task_id = task_id;
  out.config = config;
  for (const auto* m : members) {
    splits.push_back(split_support_query(m->data, config.support_fraction));
    out.trained_on.push_back(m->key);
  }
  TdMetaObjective obj(init, std::move(splits), config);
  const Vector theta = meta_optimize(
      obj, init.net.params(), config, seed, &out.query_losses, [&](int step, const Vector& t) {
        if (config.target_update_interval > 0 && step > 0 && step % config.target_update_interval == 0)
          obj.set_target(t);
      });
  out.network = init;
  out.network.net.set_params(theta);
  return out;
}

MetaModel meta_train(const TaskNode& task, QEvaluator& eval, const MetaConfig& config,
                     std::uint64_t seed) {
  std::vector<const CombinationData*> members;
  for (int m : task.members) members.push_back(&eval.inputs().at(static_cast<std::size_t>(m)));
  const QNetwork& init = eval.evaluate(task.members).network;
  return meta_train(task_id(task), init, members, config, seed);
}

TaskSelection select_task(const CombinationKey& key, const TaskForest& forest) {
  if (forest.roots.empty()) throw InvalidConfig("forest has no roots");
  TaskSelection best;
  auto better = [&](std::size_t overlap, double q, const std::string& id) {
    if (best.root < 0) return true;
    const double best_q = forest.node(best.root).q;
    return std::tie(overlap, q) > std::tie(best.overlap, best_q) ||
           (overlap == best.overlap && q == best_q && id < best.task_id);
  };
  for (int r : forest.roots) {
    const TaskNode& node = forest.node(r);
    const std::size_t overlap = shared_attributes(node.k, key.merged_attributes).size();
    const std::string id = task_id(node);
    if (better(overlap, node.q, id)) best = {r, id, overlap, false};
  }
  best.fallback = best.overlap == 0;
  return best;
}

AdaptedModel fast_adapt(const MetaModel& meta, const Dataset& support, const AdaptConfig& config) {
  if (support.empty()) throw InvalidConfig("support set is empty");
  if (support.state_dim != meta.network.state_dim() || support.branch_sizes != meta.network.branch_sizes())
    throw ArityMismatch("support data shape differs from the meta-model");
  const int steps = config.steps < 0 ? meta.config.inner_steps : config.steps;
  const double lr = config.lr < 0 ? meta.config.inner_lr : config.lr;
  AdaptedModel out;
  out.network = meta.network;
  if (config.refit_normalizer) out.network.normalizer.fit(support);
  const QNetwork target = out.network;
  ReplayMemory memory(support.size());
  memory.push_all(support);
  Rng rng(derive_seed(config.seed, "adapt"));
  for (int k = 0; k < steps; ++k) {
    const auto pos = memory.sample(meta.config.batch_size, rng);
    const SequenceBatch batch = make_batch(out.network.normalizer, memory, pos, meta.config.sequence_len);
    Vector g;
    td_loss(out.network, target, batch, meta.config.discount_factor, &g);
    clip_norm(g, meta.config.grad_clip);
    out.network.net.params() -= lr * g;
  }
  out.source_task_id = meta.task_id;
  out.source_hash = meta_model_hash(meta);
  out.steps_used = steps;
  out.support_size = support.size();
  return out;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

nlohmann::json key_json(const CombinationKey& k) {
  return {{"device", k.device_id}, {"app", k.app_id}, {"attributes", k.merged_attributes}};
}

CombinationKey parse_key(const nlohmann::json& j) {
  CombinationKey k;
  k.device_id = j.at("device").get<std::string>();
  k.app_id = j.at("app").get<std::string>();
  k.merged_attributes = j.at("attributes").get<AttributeMap>();
  return k;
}

nlohmann::json config_json(const MetaConfig& c) {
  return {{"inner_lr", hexfloat(c.inner_lr)},
          {"inner_steps", c.inner_steps},
          {"meta_lr", hexfloat(c.meta_lr)},
          {"outer_steps", c.outer_steps},
          {"support_fraction", hexfloat(c.support_fraction)},
          {"order", c.order == MetaOrder::first ? "first" : "second"},
          {"optimizer", c.optimizer == MetaOptimizer::adam ? "adam" : "sgd"},
          {"grad_clip", hexfloat(c.grad_clip)},
          {"hvp_epsilon", hexfloat(c.hvp_epsilon)},
          {"batch_size", c.batch_size},
          {"sequence_len", c.sequence_len},
          {"discount_factor", hexfloat(c.discount_factor)},
          {"target_update_interval", c.target_update_interval}};
}

MetaConfig parse_config(const nlohmann::json& j) {
  auto hf = [&](const char* k) { return parse_hexfloat(j.at(k).get<std::string>()); };
  MetaConfig c;
  c.inner_lr = hf("inner_lr");
  c.inner_steps = j.at("inner_steps").get<int>();
  c.meta_lr = hf("meta_lr");
  c.outer_steps = j.at("outer_steps").get<int>();
  c.support_fraction = hf("support_fraction");
  c.order = j.at("order").get<std::string>() == "first" ? MetaOrder::first : MetaOrder::second;
  c.optimizer = j.at("optimizer").get<std::string>() == "adam" ? MetaOptimizer::adam : MetaOptimizer::sgd;
  c.grad_clip = hf("grad_clip");
  c.hvp_epsilon = hf("hvp_epsilon");
  c.batch_size = j.at("batch_size").get<int>();
  c.sequence_len = j.at("sequence_len").get<int>();
  c.discount_factor = hf("discount_factor");
  c.target_update_interval = j.at("target_update_interval").get<int>();
  return c;
}

}  // namespace

std::string dump_meta_model(const MetaModel& m) {
  nlohmann::json j;
  j["format"] = "metadvfs-meta-model";
  j["version"] = 1;
  j["task_id"] = m.task_id;
  j["config"] = config_json(m.config);
  j["trained_on"] = nlohmann::json::array();
  for (const auto& k : m.trained_on) j["trained_on"].push_back(key_json(k));
  j["query_losses"] = nlohmann::json::array();
  for (double v : m.query_losses) j["query_losses"].push_back(hexfloat(v));
  j["network"] = dump_qnetwork(m.network);
  return j.dump(1) + "\n";
}

MetaModel parse_meta_model(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "metadvfs-meta-model" || j.at("version") != 1)
      throw ParseError("not a meta-model checkpoint");
    MetaModel m;
    m.task_id = j.at("task_id").get<std::string>();
    m.config = parse_config(j.at("config"));
    for (const auto& k : j.at("trained_on")) m.trained_on.push_back(parse_key(k));
    for (const auto& v : j.at("query_losses")) m.query_losses.push_back(parse_hexfloat(v.get<std::string>()));
    m.network = parse_qnetwork(j.at("network").get<std::string>());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("meta-model checkpoint: ") + e.what());
  }
}

std::string meta_model_hash(const MetaModel& m) { return content_hash(dump_meta_model(m)); }

std::string dump_adapted_model(const AdaptedModel& m) {
  nlohmann::json j;
  j["format"] = "metadvfs-adapted-model";
  j["version"] = 1;
  j["source_task_id"] = m.source_task_id;
  j["source_hash"] = m.source_hash;
  j["steps_used"] = m.steps_used;
  j["support_size"] = m.support_size;
  j["network"] = dump_qnetwork(m.network);
  return j.dump(1) + "\n";
}

AdaptedModel parse_adapted_model(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "metadvfs-adapted-model" || j.at("version") != 1)
      throw ParseError("not an adapted-model checkpoint");
    AdaptedModel m;
    m.source_task_id = j.at("source_task_id").get<std::string>();
    m.source_hash = j.at("source_hash").get<std::string>();
    m.steps_used = j.at("steps_used").get<int>();
    m.support_size = j.at("support_size").get<std::size_t>();
    m.network = parse_qnetwork(j.at("network").get<std::string>());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("adapted-model checkpoint: ") + e.what());
  }
}

}  // namespace metadvfs

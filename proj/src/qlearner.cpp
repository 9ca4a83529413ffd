#include "metadvfs/qlearner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

namespace metadvfs {

// ---------------------------------------------------------------------------
// normalizer and network

void StateNormalizer::fit(const Dataset& data) {
  const int n = data.state_dim;
  mean = Vector::Zero(n);
  scale = Vector::Ones(n);
  if (data.empty()) return;
  Vector sq = Vector::Zero(n);
  double count = 0;
  auto add = [&](const std::vector<double>& s) {
    for (int i = 0; i < n; ++i) {
      mean[i] += s[static_cast<std::size_t>(i)];
      sq[i] += s[static_cast<std::size_t>(i)] * s[static_cast<std::size_t>(i)];
    }
    count += 1;
  };
  for (const auto& t : data.items) {
    add(t.state);
    add(t.next_state);
  }
  mean /= count;
  for (int i = 0; i < n; ++i) {
    const double var = std::max(0.0, sq[i] / count - mean[i] * mean[i]);
    const double sd = std::sqrt(var);
    scale[i] = sd > 1e-8 * std::max(1.0, std::abs(mean[i])) ? sd : 1.0;
  }
}

void StateNormalizer::apply(std::span<const double> raw, double* out) const {
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    out[i] = fitted() ? (raw[i] - mean[k]) / scale[k] : raw[i];
  }
}

QNetwork::QNetwork(int state_dim, std::vector<int> branch_sizes, const QNetConfig& config,
                   std::uint64_t seed)
    : branches(std::move(branch_sizes)) {
  int total = 0;
  for (int b : branches) {
    if (b < 1) throw InvalidConfig("branch size must be positive");
    offsets.push_back(total);
    total += b;
  }
  NetworkConfig nc;
  nc.input_dim = state_dim;
  nc.hidden = config.hidden;
  nc.output_dim = total;
  nc.cell = config.cell;
  nc.steps_per_input = config.cell == CellType::rnn ? 1 : config.steps_per_input;
  nc.dt = config.dt;
  net = RecurrentNet(nc, seed);
}

Matrix QNetwork::encode(std::span<const double> raw) const {
  if (static_cast<int>(raw.size()) != state_dim())
    throw ArityMismatch("state has " + std::to_string(raw.size()) + " features, network expects " +
                        std::to_string(state_dim()));
  Matrix x(state_dim(), 1);
  normalizer.apply(raw, x.data());
  return x;
}

std::vector<int> QNetwork::greedy(const Matrix& q, Eigen::Index col) const {
  std::vector<int> out(branches.size());
  for (std::size_t j = 0; j < branches.size(); ++j) {
    Eigen::Index best = 0;
    q.col(col).segment(offsets[j], branches[j]).maxCoeff(&best);
    out[j] = static_cast<int>(best);
  }
  return out;
}

double EpsilonSchedule::at(long step) const {
  if (decay_steps <= 0 || step >= decay_steps) return end;
  const double frac = static_cast<double>(step) / decay_steps;
  return start + (end - start) * frac;
}

void TrainConfig::validate() const {
  if (!(discount_factor > 0 && discount_factor < 1))
    throw InvalidConfig("discount_factor must lie in (0,1)");
  if (!(learn_rate > 0)) throw InvalidConfig("learn_rate must be positive");
  if (batch_size < 1 || sequence_len < 1 || target_update_interval < 1)
    throw InvalidConfig("batch_size, sequence_len and target_update_interval must be positive");
  if (train_steps < 0) throw InvalidConfig("train_steps must be non-negative");
  if (!(epsilon.end >= 0 && epsilon.end <= epsilon.start && epsilon.start <= 1))
    throw InvalidConfig("epsilon schedule needs 0 <= end <= start <= 1");
}

ActResult act(const QNetwork& q, const HiddenState& hidden, std::span<const double> state,
              double epsilon, Rng& rng) {
  ActResult r{{}, hidden};
  if (r.hidden.h.empty()) r.hidden = q.net.zero_state(1);
  const Matrix out = q.net.step(r.hidden, q.encode(state));
  r.action = q.greedy(out);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  for (std::size_t j = 0; j < r.action.size(); ++j) {
    if (coin(rng) < epsilon) {
      std::uniform_int_distribution<int> level(0, q.branches[j] - 1);
      r.action[j] = level(rng);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// replay

ReplayMemory::ReplayMemory(std::size_t capacity) : items_(std::max<std::size_t>(capacity, 1)) {}

void ReplayMemory::push(Transition t) {
  const std::size_t slot = (head_ + size_) % items_.size();
  items_[slot] = std::move(t);
  if (size_ < items_.size())
    ++size_;
  else
    head_ = (head_ + 1) % items_.size();
}

void ReplayMemory::push_all(const Dataset& d) {
  for (const auto& t : d.items) push(t);
}

const Transition& ReplayMemory::at(std::size_t pos) const {
  return items_[(head_ + pos) % items_.size()];
}

std::vector<std::size_t> ReplayMemory::window(std::size_t pos, int len) const {
  std::vector<std::size_t> w(static_cast<std::size_t>(len));
  const int episode = at(pos).episode;
  std::size_t first = pos;
  for (int k = len - 1; k >= 0; --k) {
    const std::size_t back = static_cast<std::size_t>(len - 1 - k);
    if (back <= pos && at(pos - back).episode == episode) first = pos - back;
    w[static_cast<std::size_t>(k)] = first;
  }
  return w;
}

std::vector<std::size_t> ReplayMemory::sample(int count, Rng& rng) const {
  if (size_ == 0) throw InvalidConfig("sampling from empty replay memory");
  std::uniform_int_distribution<std::size_t> pick(0, size_ - 1);
  std::vector<std::size_t> out(static_cast<std::size_t>(count));
  for (auto& p : out) p = pick(rng);
  return out;
}

SequenceBatch make_batch(const StateNormalizer& norm, const ReplayMemory& memory,
                         std::span<const std::size_t> positions, int sequence_len) {
  const auto B = static_cast<Eigen::Index>(positions.size());
  const auto dim = static_cast<Eigen::Index>(memory.at(positions[0]).state.size());
  SequenceBatch batch;
  batch.states.assign(static_cast<std::size_t>(sequence_len), Matrix(dim, B));
  batch.next_states.assign(static_cast<std::size_t>(sequence_len), Matrix(dim, B));
  batch.rewards.resize(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const std::size_t pos = positions[static_cast<std::size_t>(b)];
    const auto w = memory.window(pos, sequence_len);
    for (int k = 0; k < sequence_len; ++k)
      norm.apply(memory.at(w[static_cast<std::size_t>(k)]).state,
                 batch.states[static_cast<std::size_t>(k)].col(b).data());
    for (int k = 0; k + 1 < sequence_len; ++k)
      batch.next_states[static_cast<std::size_t>(k)].col(b) =
          batch.states[static_cast<std::size_t>(k + 1)].col(b);
    const Transition& t = memory.at(pos);
    norm.apply(t.next_state, batch.next_states.back().col(b).data());
    batch.actions.push_back(t.action);
    batch.rewards[b] = t.reward;
  }
  return batch;
}

// ---------------------------------------------------------------------------
// TD learning

namespace {

Matrix final_readout(const RecurrentNet& net, const std::vector<Matrix>& inputs) {
  HiddenState h = net.zero_state(static_cast<int>(inputs.front().cols()));
  Matrix y;
  for (const auto& x : inputs) y = net.step(h, x);
  return y;
}

double td_loss_impl(const QNetwork& q, const QNetwork& target, const SequenceBatch& batch,
                    double gamma, Vector* grad, double* q_mean) {
  const ForwardTrace trace = q.net.forward(batch.states);
  const Matrix& Q = trace.outputs.back();
  const Matrix Qt = final_readout(target.net, batch.next_states);
  const Eigen::Index B = Q.cols();
  const int J = q.branch_count();
  const double norm = 1.0 / static_cast<double>(B * J);
  Matrix dY = Matrix::Zero(Q.rows(), B);
  double loss = 0;
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& a = batch.actions[static_cast<std::size_t>(b)];
    for (int j = 0; j < J; ++j) {
      const int off = q.head_offset(j);
      const double y =
          batch.rewards[b] + gamma * Qt.col(b).segment(off, q.branches[static_cast<std::size_t>(j)]).maxCoeff();
      const double d = Q(off + a[static_cast<std::size_t>(j)], b) - y;
      loss += d * d;
      dY(off + a[static_cast<std::size_t>(j)], b) = 2 * d * norm;
    }
  }
  if (q_mean) *q_mean = Q.mean();
  if (grad) {
    std::vector<Matrix> dys(batch.states.size());
    dys.back() = dY;
    *grad = q.net.backward(trace, dys).params;
  }
  return loss * norm;
}

}  // namespace

double td_loss(const QNetwork& q, const QNetwork& target, const SequenceBatch& batch,
               double gamma, Vector* grad) {
  return td_loss_impl(q, target, batch, gamma, grad, nullptr);
}

double td_train_step(QNetwork& q, const QNetwork& target, const SequenceBatch& batch,
                     const TrainConfig& config, Adam& optimizer) {
  Vector grad;
  const double loss = td_loss(q, target, batch, config.discount_factor, &grad);
  clip_norm(grad, config.grad_clip);
  optimizer.step(q.net.params(), grad);
  return loss;
}

std::string dump_train_log(const std::vector<TrainLogRecord>& log) {
  std::string out;
  for (const auto& r : log) {
    nlohmann::json j = {{"step", r.step}, {"loss", r.loss}, {"epsilon", r.epsilon}, {"q_mean", r.q_mean}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

Trainer::Trainer(QNetwork init, const Dataset& data, TrainConfig config, std::uint64_t seed)
    : q_(std::move(init)),
      target_(q_),
      memory_(data.size()),
      config_(config),
      adam_(config.learn_rate),
      rng_(derive_seed(seed, "replay")) {
  config_.validate();
  if (data.empty()) throw InvalidConfig("training needs a nonempty dataset");
  memory_.push_all(data);
}

double Trainer::step() {
  const auto positions = memory_.sample(config_.batch_size, rng_);
  const SequenceBatch batch = make_batch(q_.normalizer, memory_, positions, config_.sequence_len);
  Vector grad;
  double q_mean = 0;
  const double loss = td_loss_impl(q_, target_, batch, config_.discount_factor, &grad, &q_mean);
  clip_norm(grad, config_.grad_clip);
  adam_.step(q_.net.params(), grad);
  ++steps_;
  if (steps_ % config_.target_update_interval == 0) target_.net.set_params(q_.net.params());
  if (config_.log_every > 0 && (steps_ % config_.log_every == 0 || steps_ == 1))
    log_.push_back({steps_, loss, config_.epsilon.at(steps_), q_mean});
  return loss;
}

void Trainer::run(int steps) {
  for (int i = 0; i < steps; ++i) step();
}

QNetwork init_qnetwork(const Dataset& data, const QNetConfig& net_config, std::uint64_t seed) {
  QNetwork q(data.state_dim, data.branch_sizes, net_config, derive_seed(seed, "init"));
  q.normalizer.fit(data);
  return q;
}

QNetwork train_on_dataset(const std::vector<const Dataset*>& datasets, const TrainConfig& config,
                          const QNetConfig& net_config, std::uint64_t seed,
                          std::vector<TrainLogRecord>* log) {
  if (datasets.empty()) throw InvalidConfig("no datasets to train on");
  const Dataset data = datasets.size() == 1 ? *datasets.front() : concat(datasets);
  return train_on_dataset(data, config, net_config, seed, log);
}

QNetwork train_on_dataset(const Dataset& dataset, const TrainConfig& config,
                          const QNetConfig& net_config, std::uint64_t seed,
                          std::vector<TrainLogRecord>* log) {
  config.validate();
  if (dataset.empty()) throw InvalidConfig("training needs a nonempty dataset");
  Trainer trainer(init_qnetwork(dataset, net_config, seed), dataset, config, seed);
  trainer.run(config.train_steps);
  if (log) *log = trainer.log();
  return trainer.network();
}

QNetwork train_online(Environment& env, const TrainConfig& config, const QNetConfig& net_config,
                      int episode_len, std::uint64_t seed, std::vector<TrainLogRecord>* log) {
  config.validate();
  if (episode_len < 1) throw InvalidConfig("episode_len must be positive");
  Rng rng(derive_seed(seed, "online"));
  const auto sizes = env.branch_sizes();

  // Random warm-up fills the memory and fits the normalizer.
  Dataset warm{env.state_dim(), sizes, {}};
  const int warmup = std::max(config.batch_size * config.sequence_len, 64);
  int episode = 0;
  std::vector<double> s = env.reset(derive_seed_index(seed, static_cast<std::uint64_t>(episode)));
  int in_episode = 0;
  auto advance = [&](const std::vector<int>& a) {
    const StepOutcome o = env.step(a);
    std::vector<double> next = env.observe();
    Transition t{s, a, o.reward, next, episode};
    s = std::move(next);
    if (++in_episode == episode_len) {
      in_episode = 0;
      ++episode;
      s = env.reset(derive_seed_index(seed, static_cast<std::uint64_t>(episode)));
    }
    return t;
  };
  for (int i = 0; i < warmup; ++i) {
    std::vector<int> a(sizes.size());
    for (std::size_t j = 0; j < sizes.size(); ++j)
      a[j] = std::uniform_int_distribution<int>(0, sizes[j] - 1)(rng);
    warm.items.push_back(advance(a));
  }
  QNetwork q = init_qnetwork(warm, net_config, seed);
  QNetwork target = q;
  ReplayMemory memory(static_cast<std::size_t>(warmup + config.train_steps));
  memory.push_all(warm);
  Adam adam(config.learn_rate);
  std::vector<TrainLogRecord> records;
  HiddenState hidden = q.net.zero_state(1);
  for (long step = 1; step <= config.train_steps; ++step) {
    if (in_episode == 0) hidden = q.net.zero_state(1);
    const double eps = config.epsilon.at(step);
    ActResult r = act(q, hidden, s, eps, rng);
    hidden = std::move(r.hidden);
    memory.push(advance(r.action));
    const auto positions = memory.sample(config.batch_size, rng);
    const SequenceBatch batch = make_batch(q.normalizer, memory, positions, config.sequence_len);
    Vector grad;
    double q_mean = 0;
    const double loss = td_loss_impl(q, target, batch, config.discount_factor, &grad, &q_mean);
    clip_norm(grad, config.grad_clip);
    adam.step(q.net.params(), grad);
    if (step % config.target_update_interval == 0) target.net.set_params(q.net.params());
    if (config.log_every > 0 && step % config.log_every == 0) records.push_back({step, loss, eps, q_mean});
  }
  if (log) *log = std::move(records);
  return q;
}

std::vector<int> QPolicy::act(std::span<const double> state, Rng& rng) {
  ActResult r = metadvfs::act(q_, hidden_, state, epsilon_, rng);
  hidden_ = std::move(r.hidden);
  return r.action;
}

// ---------------------------------------------------------------------------
// fitted Q evaluation

namespace {

/// Sequence windows over a dataset, normalized, as (dim x N) matrices per
/// position. Returns current windows and next-state windows.
void dataset_windows(const Dataset& data, const StateNormalizer& norm, int len,
                     std::vector<Matrix>& cur, std::vector<Matrix>& next) {
  const auto N = static_cast<Eigen::Index>(data.size());
  const auto dim = static_cast<Eigen::Index>(data.state_dim);
  cur.assign(static_cast<std::size_t>(len), Matrix(dim, N));
  next.assign(static_cast<std::size_t>(len), Matrix(dim, N));
  std::size_t start = 0;
  for (std::size_t t = 0; t < data.size(); ++t) {
    if (t > 0 && data.items[t].episode != data.items[t - 1].episode) start = t;
    const auto col = static_cast<Eigen::Index>(t);
    for (int k = 0; k < len; ++k) {
      const std::size_t back = static_cast<std::size_t>(len - 1 - k);
      const std::size_t src = t >= start + back ? t - back : start;
      norm.apply(data.items[src].state, cur[static_cast<std::size_t>(k)].col(col).data());
    }
    for (int k = 0; k + 1 < len; ++k)
      next[static_cast<std::size_t>(k)].col(col) = cur[static_cast<std::size_t>(k + 1)].col(col);
    norm.apply(data.items[t].next_state, next.back().col(col).data());
  }
}

Matrix features(const RecurrentNet& reservoir, const std::vector<Matrix>& windows, bool use_reservoir) {
  const Matrix& last = windows.back();
  Matrix r(0, last.cols());
  if (use_reservoir) {
    HiddenState h = reservoir.zero_state(static_cast<int>(last.cols()));
    for (const auto& x : windows) reservoir.step(h, x);
    r = h.h.back();
  }
  Matrix phi(1 + last.rows() + r.rows(), last.cols());
  phi.row(0).setOnes();
  phi.middleRows(1, last.rows()) = last;
  phi.bottomRows(r.rows()) = r;
  return phi;
}

/// Basis over a joint action: 1, then l_j^k for every branch j and power
/// 1..degree, then l_i * l_j for branch pairs, with l = level / (K - 1).
Vector action_basis(const std::vector<int>& action, const std::vector<int>& sizes, int degree,
                    bool pairwise) {
  const std::size_t J = sizes.size();
  std::vector<double> l(J);
  for (std::size_t j = 0; j < J; ++j)
    l[j] = sizes[j] > 1 ? static_cast<double>(action[j]) / (sizes[j] - 1) : 0.0;
  std::vector<double> out{1.0};
  for (std::size_t j = 0; j < J; ++j) {
    double p = 1.0;
    for (int k = 1; k <= degree; ++k) out.push_back(p *= l[j]);
  }
  if (pairwise)
    for (std::size_t i = 0; i < J; ++i)
      for (std::size_t j = i + 1; j < J; ++j) out.push_back(l[i] * l[j]);
  return Eigen::Map<Vector>(out.data(), static_cast<Eigen::Index>(out.size()));
}

/// Row of the design matrix: Kronecker product of the action basis and phi.
void design_row(const Vector& basis, const Matrix& phi, Eigen::Index col, double* out) {
  const auto d = phi.rows();
  for (Eigen::Index k = 0; k < basis.size(); ++k)
    Eigen::Map<Vector>(out + k * d, d) = basis[k] * phi.col(col);
}

}  // namespace

QEstimate fqe_q_value(const QNetwork& policy, const Dataset& data, const TrainConfig& config,
                      std::uint64_t seed, const FqeConfig& fqe) {
  if (data.empty()) throw InvalidConfig("FQE needs a nonempty dataset");
  if (data.state_dim != policy.state_dim() || data.branch_sizes != policy.branch_sizes())
    throw ArityMismatch(data.shape_signature() + " vs policy network");
  const int L = config.sequence_len;
  const double gamma = config.discount_factor;
  const auto N = static_cast<Eigen::Index>(data.size());

  // Greedy actions of the evaluated policy on s and s'.
  std::vector<Matrix> pcur, pnext;
  dataset_windows(data, policy.normalizer, L, pcur, pnext);
  const Matrix q_cur = final_readout(policy.net, pcur);
  const Matrix q_next = final_readout(policy.net, pnext);

  // Policy-independent regression features.
  StateNormalizer norm;
  norm.fit(data);
  std::vector<Matrix> fcur, fnext;
  dataset_windows(data, norm, L, fcur, fnext);
  NetworkConfig rc;
  rc.input_dim = data.state_dim;
  rc.hidden = {std::max(fqe.reservoir_width, 1)};
  rc.output_dim = 1;
  const RecurrentNet reservoir(rc, derive_seed(seed, "fqe-reservoir"));
  const Matrix phi = features(reservoir, fcur, fqe.reservoir_width > 0);
  const Matrix phi_next = features(reservoir, fnext, fqe.reservoir_width > 0);
  const int d = static_cast<int>(phi.rows());

  std::vector<std::vector<int>> pi(static_cast<std::size_t>(N)), pi_next(static_cast<std::size_t>(N));
  for (Eigen::Index t = 0; t < N; ++t) {
    pi[static_cast<std::size_t>(t)] = policy.greedy(q_cur, t);
    pi_next[static_cast<std::size_t>(t)] = policy.greedy(q_next, t);
  }

  const auto& sizes = policy.branches;
  const Eigen::Index P = action_basis(pi[0], sizes, fqe.level_degree, fqe.pairwise).size();
  const Eigen::Index D = static_cast<Eigen::Index>(d) * P;
  Matrix X(D, N), Xn(D, N), Xpi(D, N);
  Vector r(N);
  double r_min = std::numeric_limits<double>::infinity(), r_max = -r_min;
  for (Eigen::Index t = 0; t < N; ++t) {
    const auto st = static_cast<std::size_t>(t);
    design_row(action_basis(data.items[st].action, sizes, fqe.level_degree, fqe.pairwise), phi, t, X.col(t).data());
    design_row(action_basis(pi_next[st], sizes, fqe.level_degree, fqe.pairwise), phi_next, t, Xn.col(t).data());
    design_row(action_basis(pi[st], sizes, fqe.level_degree, fqe.pairwise), phi, t, Xpi.col(t).data());
    r[t] = data.items[st].reward;
    r_min = std::min(r_min, r[t]);
    r_max = std::max(r_max, r[t]);
  }
  // Any discounted return lies between these; targets are clipped to them.
  const double lo = r_min / (1 - gamma);
  const double hi = r_max / (1 - gamma);

  Matrix A = X * X.transpose();
  A.diagonal().head(d).array() += fqe.ridge * static_cast<double>(N);
  A.diagonal().tail(D - d).array() += fqe.level_ridge * static_cast<double>(N);
  const Eigen::LDLT<Matrix> solver(A);

  QEstimate est;
  est.seed = seed;
  double best = std::numeric_limits<double>::infinity();
  Vector w = Vector::Zero(D), best_w = w;
  Vector fitted = Vector::Zero(N);
  for (int it = 1; it <= fqe.max_iterations; ++it) {
    const Vector next = (Xn.transpose() * w).cwiseMax(lo).cwiseMin(hi);
    const Vector y = r + gamma * next;
    w = solver.solve(X * y);
    const Vector f = X.transpose() * w;
    const double residual = std::sqrt((f - fitted).squaredNorm() / static_cast<double>(N));
    fitted = f;
    est.iterations = it;
    if (!std::isfinite(residual)) break;
    if (residual < best) {
      best = residual;
      best_w = w;
    }
    if (residual < fqe.tolerance) {
      est.converged = true;
      break;
    }
  }
  est.residual = best;

  const Vector v = (Xpi.transpose() * best_w).cwiseMax(lo).cwiseMin(hi);
  double total = 0;
  int count = 0;
  for (Eigen::Index t = 0; t < N; ++t) {
    const auto st = static_cast<std::size_t>(t);
    if (fqe.average == FqeAverage::initial_states && t > 0 &&
        data.items[st].episode == data.items[st - 1].episode)
      continue;
    total += v[t];
    ++count;
  }
  est.value = total / count;
  est.n_states = count;
  return est;
}

// ---------------------------------------------------------------------------
// checkpoint

std::string dump_qnetwork(const QNetwork& q) {
  std::ostringstream out;
  out << "metadvfs-qnet 1\nbranches";
  for (int b : q.branches) out << ' ' << b;
  out << "\nmean";
  for (Eigen::Index i = 0; i < q.normalizer.mean.size(); ++i) out << ' ' << hexfloat(q.normalizer.mean[i]);
  out << "\nscale";
  for (Eigen::Index i = 0; i < q.normalizer.scale.size(); ++i) out << ' ' << hexfloat(q.normalizer.scale[i]);
  out << "\n" << dump_network(q.net);
  return out.str();
}

QNetwork parse_qnetwork(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "metadvfs-qnet 1") throw ParseError("not a metadvfs-qnet v1 checkpoint");
  auto values = [&](const char* key) {
    if (!std::getline(in, line)) throw ParseError(std::string("missing ") + key);
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag != key) throw ParseError(std::string("expected ") + key);
    std::vector<std::string> out;
    for (std::string v; ls >> v;) out.push_back(v);
    return out;
  };
  QNetwork q;
  for (const auto& v : values("branches")) q.branches.push_back(std::stoi(v));
  const auto mean = values("mean");
  const auto scale = values("scale");
  if (mean.size() != scale.size()) throw ParseError("normalizer size mismatch");
  q.normalizer.mean.resize(static_cast<Eigen::Index>(mean.size()));
  q.normalizer.scale.resize(static_cast<Eigen::Index>(scale.size()));
  for (std::size_t i = 0; i < mean.size(); ++i) {
    q.normalizer.mean[static_cast<Eigen::Index>(i)] = parse_hexfloat(mean[i]);
    q.normalizer.scale[static_cast<Eigen::Index>(i)] = parse_hexfloat(scale[i]);
  }
  std::ostringstream rest;
  rest << in.rdbuf();
  q.net = parse_network(rest.str());
  int total = 0;
  for (int b : q.branches) {
    q.offsets.push_back(total);
    total += b;
  }
  if (total != q.net.config().output_dim) throw ParseError("head sizes do not match readout");
  return q;
}

}  // namespace metadvfs

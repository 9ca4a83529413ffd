#include "metadvfs/ltc.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace metadvfs {

double softplus(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

double inverse_softplus(double y) {
  return y > 30.0 ? y : std::log(std::expm1(y));
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

RecurrentNet::RecurrentNet(NetworkConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  if (config_.input_dim < 1 || config_.output_dim < 1 || config_.hidden.empty())
    throw InvalidConfig("network needs input, hidden and output sizes");
  for (int n : config_.hidden)
    if (n < 1) throw InvalidConfig("hidden width must be >= 1");
  if (config_.steps_per_input < 1 || !(config_.dt > 0))
    throw InvalidConfig("solver needs steps_per_input >= 1 and dt > 0");
  layout();

  Rng rng(derive_seed(seed, "net.init"));
  auto fill = [&](std::size_t offset, std::size_t count, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < count; ++i) params_[static_cast<Eigen::Index>(offset + i)] = u(rng);
  };
  const double raw_tau = inverse_softplus(1.0 - config_.tau_min);
  int below = config_.input_dim;
  for (int l = 0; l < layer_count(); ++l) {
    const int n = config_.hidden[static_cast<std::size_t>(l)];
    const auto& o = offsets_[static_cast<std::size_t>(l)];
    fill(o.W, static_cast<std::size_t>(n * n), n);
    fill(o.U, static_cast<std::size_t>(n * below), below);
    if (config_.cell == CellType::ltc)
      for (int i = 0; i < n; ++i) params_[static_cast<Eigen::Index>(o.tau) + i] = raw_tau;
    below = n;
  }
  fill(out_W_, static_cast<std::size_t>(config_.output_dim * below), below);
}

void RecurrentNet::layout() {
  offsets_.clear();
  std::size_t at = 0;
  int below = config_.input_dim;
  for (int n : config_.hidden) {
    Offsets o{};
    o.W = at;
    at += static_cast<std::size_t>(n * n);
    o.U = at;
    at += static_cast<std::size_t>(n * below);
    o.b = at;
    at += static_cast<std::size_t>(n);
    o.tau = at;
    if (config_.cell == CellType::ltc) at += static_cast<std::size_t>(n);
    offsets_.push_back(o);
    below = n;
  }
  out_W_ = at;
  at += static_cast<std::size_t>(config_.output_dim * below);
  out_b_ = at;
  at += static_cast<std::size_t>(config_.output_dim);
  params_ = Vector::Zero(static_cast<Eigen::Index>(at));
}

void RecurrentNet::set_params(const Vector& p) {
  if (p.size() != params_.size())
    throw ArityMismatch("parameter vector of size " + std::to_string(p.size()) + ", expected " +
                        std::to_string(params_.size()));
  params_ = p;
}

namespace {
int width_below(const NetworkConfig& c, int layer) {
  return layer == 0 ? c.input_dim : c.hidden[static_cast<std::size_t>(layer - 1)];
}
}  // namespace

#define METADVFS_VIEW(Type, name, offset, rows, cols)                                    \
  Eigen::Map<const Type> RecurrentNet::name(int layer) const {                            \
    const auto& o = offsets_.at(static_cast<std::size_t>(layer));                         \
    (void)o;                                                                              \
    return Eigen::Map<const Type>(params_.data() + (offset), rows, cols);                 \
  }                                                                                       \
  Eigen::Map<Type> RecurrentNet::name##_mut(int layer) {                                  \
    const auto& o = offsets_.at(static_cast<std::size_t>(layer));                         \
    (void)o;                                                                              \
    return Eigen::Map<Type>(params_.data() + (offset), rows, cols);                       \
  }

METADVFS_VIEW(Matrix, W, o.W, config_.hidden[layer], config_.hidden[layer])
METADVFS_VIEW(Matrix, U, o.U, config_.hidden[layer], width_below(config_, layer))
METADVFS_VIEW(Vector, b, o.b, config_.hidden[layer], 1)
METADVFS_VIEW(Vector, tau_raw, o.tau, config_.cell == CellType::ltc ? config_.hidden[layer] : 0,
              1)

#undef METADVFS_VIEW

Vector RecurrentNet::tau(int layer) const {
  const auto raw = tau_raw(layer);
  Vector t(raw.size());
  for (Eigen::Index i = 0; i < raw.size(); ++i) t[i] = softplus(raw[i]) + config_.tau_min;
  return t;
}

Eigen::Map<const Matrix> RecurrentNet::W_out() const {
  return {params_.data() + out_W_, config_.output_dim, config_.hidden.back()};
}
Eigen::Map<const Vector> RecurrentNet::b_out() const {
  return {params_.data() + out_b_, config_.output_dim};
}
Eigen::Map<Matrix> RecurrentNet::W_out_mut() {
  return {params_.data() + out_W_, config_.output_dim, config_.hidden.back()};
}
Eigen::Map<Vector> RecurrentNet::b_out_mut() {
  return {params_.data() + out_b_, config_.output_dim};
}

HiddenState RecurrentNet::zero_state(int batch) const {
  HiddenState s;
  for (int n : config_.hidden) s.h.push_back(Matrix::Zero(n, batch));
  return s;
}

void RecurrentNet::check_finite(const Matrix& h) const {
  if (!h.allFinite() || (h.size() > 0 && h.cwiseAbs().maxCoeff() > config_.blowup_bound))
    throw NumericalBlowup("hidden state exceeded " + std::to_string(config_.blowup_bound));
}

Matrix RecurrentNet::step(HiddenState& h, const Matrix& x) const {
  if (x.rows() != config_.input_dim)
    throw ArityMismatch("input has " + std::to_string(x.rows()) + " rows, expected " +
                        std::to_string(config_.input_dim));
  if (static_cast<int>(h.h.size()) != layer_count()) throw ArityMismatch("hidden state layers");
  const bool ltc = config_.cell == CellType::ltc;
  const int substeps = ltc ? config_.steps_per_input : 1;
  std::vector<Vector> rate(static_cast<std::size_t>(layer_count()));
  if (ltc)
    for (int l = 0; l < layer_count(); ++l) rate[static_cast<std::size_t>(l)] = config_.dt * tau(l).cwiseInverse();
  for (int k = 0; k < substeps; ++k) {
    for (int l = 0; l < layer_count(); ++l) {
      auto& hl = h.h[static_cast<std::size_t>(l)];
      const Matrix& below = l == 0 ? x : h.h[static_cast<std::size_t>(l - 1)];
      Matrix a = ((W(l) * hl + U(l) * below).colwise() + b(l)).array().tanh().matrix();
      if (ltc)
        hl += rate[static_cast<std::size_t>(l)].asDiagonal() * (a - hl);
      else
        hl = std::move(a);
      check_finite(hl);
    }
  }
  return (W_out() * h.h.back()).colwise() + b_out();
}

ForwardTrace RecurrentNet::forward(const std::vector<Matrix>& inputs,
                                   const HiddenState* initial) const {
  ForwardTrace tr;
  tr.params = params_;
  tr.steps = static_cast<int>(inputs.size());
  tr.batch = inputs.empty() ? 0 : static_cast<int>(inputs.front().cols());
  tr.inputs = inputs;
  HiddenState h = initial ? *initial : zero_state(tr.batch);
  const bool ltc = config_.cell == CellType::ltc;
  const int substeps = ltc ? config_.steps_per_input : 1;
  std::vector<Vector> rate(static_cast<std::size_t>(layer_count()));
  if (ltc)
    for (int l = 0; l < layer_count(); ++l) rate[static_cast<std::size_t>(l)] = config_.dt * tau(l).cwiseInverse();

  tr.states.resize(inputs.size());
  tr.activations.resize(inputs.size());
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const Matrix& x = inputs[t];
    if (x.rows() != config_.input_dim || x.cols() != tr.batch)
      throw ArityMismatch("sequence input " + std::to_string(t) + " has wrong shape");
    tr.states[t].resize(static_cast<std::size_t>(substeps));
    tr.activations[t].resize(static_cast<std::size_t>(substeps));
    for (int k = 0; k < substeps; ++k) {
      auto& st = tr.states[t][static_cast<std::size_t>(k)];
      auto& ac = tr.activations[t][static_cast<std::size_t>(k)];
      st.resize(static_cast<std::size_t>(layer_count()));
      ac.resize(static_cast<std::size_t>(layer_count()));
      for (int l = 0; l < layer_count(); ++l) {
        const auto li = static_cast<std::size_t>(l);
        auto& hl = h.h[li];
        const Matrix& below = l == 0 ? x : h.h[li - 1];
        st[li] = hl;
        ac[li] = ((W(l) * hl + U(l) * below).colwise() + b(l)).array().tanh().matrix();
        if (ltc)
          hl += rate[li].asDiagonal() * (ac[li] - hl);
        else
          hl = ac[li];
        check_finite(hl);
      }
    }
    tr.final_hidden.push_back(h.h.back());
    tr.outputs.push_back((W_out() * h.h.back()).colwise() + b_out());
  }
  return tr;
}

NetworkGradients RecurrentNet::backward(const ForwardTrace& tr,
                                        const std::vector<Matrix>& output_grads) const {
  if (tr.params.size() != params_.size() || tr.params != params_)
    throw TraceMismatch("trace was recorded with different parameters");
  if (static_cast<int>(output_grads.size()) != tr.steps)
    throw TraceMismatch("expected " + std::to_string(tr.steps) + " output gradients");

  const bool ltc = config_.cell == CellType::ltc;
  const int substeps = ltc ? config_.steps_per_input : 1;
  const auto L = static_cast<std::size_t>(layer_count());

  NetworkGradients g;
  g.params = Vector::Zero(params_.size());
  g.inputs.assign(static_cast<std::size_t>(tr.steps), Matrix());

  std::vector<Vector> tau_v(L), rate(L);
  if (ltc)
    for (std::size_t l = 0; l < L; ++l) {
      tau_v[l] = tau(static_cast<int>(l));
      rate[l] = config_.dt * tau_v[l].cwiseInverse();
    }

  std::vector<Matrix> G(L);
  for (std::size_t l = 0; l < L; ++l) G[l] = Matrix::Zero(config_.hidden[l], tr.batch);
  std::vector<Vector> dtau(L);
  for (std::size_t l = 0; l < L; ++l) dtau[l] = Vector::Zero(config_.hidden[l]);

  Eigen::Map<Matrix> dWout(g.params.data() + out_W_, config_.output_dim, config_.hidden.back());
  Eigen::Map<Vector> dbout(g.params.data() + out_b_, config_.output_dim);

  // State of layer l after sub-step k of input t.
  auto after = [&](std::size_t t, std::size_t k, std::size_t l) -> Matrix {
    const Matrix& h = tr.states[t][k][l];
    const Matrix& a = tr.activations[t][k][l];
    if (!ltc) return a;
    return h + rate[l].asDiagonal() * (a - h);
  };

  for (int ti = tr.steps - 1; ti >= 0; --ti) {
    const auto t = static_cast<std::size_t>(ti);
    g.inputs[t] = Matrix::Zero(config_.input_dim, tr.batch);
    const Matrix& dY = output_grads[t];
    if (dY.size() > 0) {
      if (dY.rows() != config_.output_dim || dY.cols() != tr.batch)
        throw TraceMismatch("output gradient shape");
      dWout.noalias() += dY * tr.final_hidden[t].transpose();
      dbout += dY.rowwise().sum();
      G[L - 1].noalias() += W_out().transpose() * dY;
    }
    for (int ki = substeps - 1; ki >= 0; --ki) {
      const auto k = static_cast<std::size_t>(ki);
      for (int li = static_cast<int>(L) - 1; li >= 0; --li) {
        const auto l = static_cast<std::size_t>(li);
        const auto& o = offsets_[l];
        const int n = config_.hidden[l];
        const int nb = width_below(config_, li);
        const Matrix& h = tr.states[t][k][l];
        const Matrix& a = tr.activations[t][k][l];
        const Matrix below = l == 0 ? tr.inputs[t] : after(t, k, l - 1);

        Matrix dA, Gh;
        if (ltc) {
          dA = rate[l].asDiagonal() * G[l];
          // d h_new / d tau = -dt / tau^2 * (a - h)
          const Vector coeff = -(config_.dt * tau_v[l].array().square().inverse()).matrix();
          dtau[l] += coeff.cwiseProduct((G[l].cwiseProduct(a - h)).rowwise().sum());
          Gh = (Vector::Ones(n) - rate[l]).asDiagonal() * G[l];
        } else {
          dA = G[l];
          Gh = Matrix::Zero(n, tr.batch);
        }
        const Matrix dZ = dA.cwiseProduct((1.0 - a.array().square()).matrix());

        Eigen::Map<Matrix>(g.params.data() + o.W, n, n).noalias() += dZ * h.transpose();
        Eigen::Map<Matrix>(g.params.data() + o.U, n, nb).noalias() += dZ * below.transpose();
        Eigen::Map<Vector>(g.params.data() + o.b, n) += dZ.rowwise().sum();
        Gh.noalias() += W(li).transpose() * dZ;
        if (l == 0)
          g.inputs[t].noalias() += U(li).transpose() * dZ;
        else
          G[l - 1].noalias() += U(li).transpose() * dZ;
        G[l] = std::move(Gh);
      }
    }
  }
  if (ltc)
    for (std::size_t l = 0; l < L; ++l) {
      const auto raw = tau_raw(static_cast<int>(l));
      Eigen::Map<Vector> d(g.params.data() + offsets_[l].tau, config_.hidden[l]);
      for (Eigen::Index i = 0; i < raw.size(); ++i) d[i] = dtau[l][i] * sigmoid(raw[i]);
    }
  return g;
}

RecurrentNet with_rnn_backbone(NetworkConfig config, std::uint64_t seed) {
  config.cell = CellType::rnn;
  return RecurrentNet(std::move(config), seed);
}

// ---------------------------------------------------------------------------
// checkpoint

std::string dump_network(const RecurrentNet& net) {
  const auto& c = net.config();
  std::ostringstream out;
  out << "metadvfs-net 1\n";
  out << "cell " << (c.cell == CellType::ltc ? "ltc" : "rnn") << "\n";
  out << "input " << c.input_dim << "\n";
  out << "hidden";
  for (int n : c.hidden) out << ' ' << n;
  out << "\n";
  out << "output " << c.output_dim << "\n";
  out << "steps_per_input " << c.steps_per_input << "\n";
  out << "dt " << hexfloat(c.dt) << "\n";
  out << "tau_min " << hexfloat(c.tau_min) << "\n";
  out << "blowup_bound " << hexfloat(c.blowup_bound) << "\n";
  out << "params " << net.param_count() << "\n";
  for (Eigen::Index i = 0; i < net.params().size(); ++i) out << hexfloat(net.params()[i]) << "\n";
  return out.str();
}

RecurrentNet parse_network(const std::string& text) {
  std::istringstream in(text);
  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != "metadvfs-net" || version != 1)
    throw ParseError("not a metadvfs-net v1 checkpoint");
  NetworkConfig c;
  c.hidden.clear();
  std::string line;
  std::size_t count = 0;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "cell") {
      std::string v;
      ls >> v;
      c.cell = v == "rnn" ? CellType::rnn : CellType::ltc;
    } else if (key == "input") {
      ls >> c.input_dim;
    } else if (key == "hidden") {
      int n;
      while (ls >> n) c.hidden.push_back(n);
    } else if (key == "output") {
      ls >> c.output_dim;
    } else if (key == "steps_per_input") {
      ls >> c.steps_per_input;
    } else if (key == "dt" || key == "tau_min" || key == "blowup_bound") {
      std::string v;
      ls >> v;
      (key == "dt" ? c.dt : key == "tau_min" ? c.tau_min : c.blowup_bound) = parse_hexfloat(v);
    } else if (key == "params") {
      ls >> count;
      break;
    } else if (!key.empty()) {
      throw ParseError("unknown checkpoint field '" + key + "'");
    }
  }
  RecurrentNet net(c, 0);
  if (count != net.param_count())
    throw ParseError("checkpoint has " + std::to_string(count) + " params, shape needs " +
                     std::to_string(net.param_count()));
  Vector p(static_cast<Eigen::Index>(count));
  for (std::size_t i = 0; i < count; ++i) {
    std::string v;
    if (!(in >> v)) throw ParseError("truncated checkpoint");
    p[static_cast<Eigen::Index>(i)] = parse_hexfloat(v);
  }
  net.set_params(p);
  return net;
}

}  // namespace metadvfs

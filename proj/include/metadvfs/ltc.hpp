#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "metadvfs/common.hpp"

namespace metadvfs {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class CellType {
  ltc,  // liquid time-constant cell integrated with explicit Euler
  rnn,  // plain tanh recurrence, one update per input (ablation backbone)
};

struct NetworkConfig {
  int input_dim = 1;
  std::vector<int> hidden = {16};
  int output_dim = 1;
  CellType cell = CellType::ltc;
  int steps_per_input = 4;
  double dt = 0.25;
  double tau_min = 1e-2;
  double blowup_bound = 1e6;
};

/// Per-layer hidden state for a batch: hidden[l] is (n_l x batch).
struct HiddenState {
  std::vector<Matrix> h;
};

/// Everything backward() needs from a forward pass.
struct ForwardTrace {
  Vector params;  // parameters the pass ran with
  int steps = 0;
  int batch = 0;
  // states[t][k][l]: layer l state before sub-step k of input t.
  std::vector<std::vector<std::vector<Matrix>>> states;
  // activations[t][k][l]: tanh(...) of that sub-step.
  std::vector<std::vector<std::vector<Matrix>>> activations;
  std::vector<Matrix> inputs;
  std::vector<Matrix> final_hidden;  // last layer state after each input
  std::vector<Matrix> outputs;       // readout after each input
};

struct NetworkGradients {
  Vector params;
  std::vector<Matrix> inputs;
};

/// Multi-layer continuous-time recurrent network.
///
/// For an LTC cell, layer l evolves as
///   tau * dh/dt = -h + tanh(W h + U h_below + b)
/// with h_below = x for the first layer, integrated for steps_per_input Euler
/// sub-steps of size dt per input. Layers update in order within a sub-step,
/// so layer l sees layer l-1's freshly updated state. The readout is
/// y = W_out h_last + b_out. tau = softplus(raw) + tau_min stays positive for
/// any raw value.
///
/// All parameters live in one flat vector; layout per layer is W (n x n),
/// U (n x n_below), b (n), tau_raw (n, LTC only), then W_out and b_out.
/// Matrices are column-major.
class RecurrentNet {
 public:
  RecurrentNet() = default;
  RecurrentNet(NetworkConfig config, std::uint64_t seed);

  const NetworkConfig& config() const { return config_; }
  int layer_count() const { return static_cast<int>(config_.hidden.size()); }
  std::size_t param_count() const { return static_cast<std::size_t>(params_.size()); }

  const Vector& params() const { return params_; }
  Vector& params() { return params_; }
  void set_params(const Vector& p);

  Eigen::Map<const Matrix> W(int layer) const;
  Eigen::Map<const Matrix> U(int layer) const;
  Eigen::Map<const Vector> b(int layer) const;
  Eigen::Map<const Vector> tau_raw(int layer) const;
  Vector tau(int layer) const;
  Eigen::Map<const Matrix> W_out() const;
  Eigen::Map<const Vector> b_out() const;

  /// Mutable views for tests and hand-built networks.
  Eigen::Map<Matrix> W_mut(int layer);
  Eigen::Map<Matrix> U_mut(int layer);
  Eigen::Map<Vector> b_mut(int layer);
  Eigen::Map<Vector> tau_raw_mut(int layer);
  Eigen::Map<Matrix> W_out_mut();
  Eigen::Map<Vector> b_out_mut();

  HiddenState zero_state(int batch) const;

  /// One input step: integrates every layer and returns the readout.
  Matrix step(HiddenState& h, const Matrix& x) const;

  /// Runs a sequence (inputs[t] is input_dim x batch) and records a trace.
  ForwardTrace forward(const std::vector<Matrix>& inputs,
                       const HiddenState* initial = nullptr) const;

  /// Exact reverse-mode gradients of the unrolled computation.
  /// output_grads[t] is dLoss/dy_t (output_dim x batch); empty matrices mean zero.
  NetworkGradients backward(const ForwardTrace& trace,
                            const std::vector<Matrix>& output_grads) const;

 private:
  struct Offsets {
    std::size_t W, U, b, tau;
  };
  void layout();
  void check_finite(const Matrix& h) const;

  NetworkConfig config_;
  Vector params_;
  std::vector<Offsets> offsets_;
  std::size_t out_W_ = 0, out_b_ = 0;
};

double softplus(double x);
double inverse_softplus(double y);

/// Ablation backbone: same dimensions and interface, plain tanh recurrence.
RecurrentNet with_rnn_backbone(NetworkConfig config, std::uint64_t seed);

/// Text checkpoint with a shape header; values are hex floats so a round
/// trip is bit-exact.
std::string dump_network(const RecurrentNet& net);
RecurrentNet parse_network(const std::string& text);

}  // namespace metadvfs

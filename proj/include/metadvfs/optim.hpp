#pragma once

#include <cmath>

#include "metadvfs/ltc.hpp"

namespace metadvfs {

/// Adam over a flat parameter vector.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(Vector& params, const Vector& grad) {
    if (m_.size() != params.size()) {
      m_ = Vector::Zero(params.size());
      v_ = Vector::Zero(params.size());
      t_ = 0;
    }
    ++t_;
    m_ = beta1_ * m_ + (1 - beta1_) * grad;
    v_ = beta2_ * v_ + (1 - beta2_) * grad.cwiseProduct(grad);
    const double c1 = 1 - std::pow(beta1_, t_);
    const double c2 = 1 - std::pow(beta2_, t_);
    params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

  double learning_rate() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  Vector m_, v_;
  int t_ = 0;
};

/// Rescales `grad` in place so its L2 norm is at most `max_norm` (<= 0 disables).
inline void clip_norm(Vector& grad, double max_norm) {
  if (max_norm <= 0) return;
  const double n = grad.norm();
  if (n > max_norm) grad *= max_norm / n;
}

}  // namespace metadvfs

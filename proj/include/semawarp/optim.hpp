// Adam and the flat-then-linear-decay learning-rate schedule.
#pragma once

#include <cmath>
#include <vector>

#include "semawarp/nets.hpp"

namespace semawarp {

/// Constant for `flat` epochs, then linear to exactly zero at flat + decay.
inline double scheduled_lr(double lr_initial, std::size_t flat, std::size_t decay, double epoch) {
  if (epoch < double(flat)) return lr_initial;
  if (decay == 0) return 0.0;
  const double frac = (epoch - double(flat)) / double(decay);
  return frac >= 1.0 ? 0.0 : lr_initial * (1.0 - frac);
}

template <typename T>
class Adam {
 public:
  explicit Adam(nn::ParamSet<T>& params, double beta1 = 0.5, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(&params), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [_, v] : params.items()) {
      m_.emplace_back(v->value.size(), 0.0);
      v_.emplace_back(v->value.size(), 0.0);
    }
  }

  /// One update using the gradients accumulated on the parameters. Parameters
  /// without a gradient are left untouched.
  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    const auto& items = params_->items();
    for (std::size_t i = 0; i < items.size(); ++i) {
      auto& var = *items[i].second;
      if (var.grad.size() != var.value.size()) continue;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < var.value.size(); ++k) {
        const double g = double(var.grad[k]);
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * g * g;
        var.value[k] -= T(lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_));
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  nn::ParamSet<T>* params_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace semawarp

#pragma once

#include <cmath>
#include <vector>

#include "datwep/errors.hpp"
#include "datwep/model.hpp"

namespace datwep::optim {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip_norm = 0.0;  // 0: off

  void validate() const {
    if (!(lr > 0.0)) throw ValidationError("learning rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ValidationError("Adam betas must be in [0, 1)");
    }
    if (!(eps > 0.0)) throw ValidationError("Adam eps must be > 0");
    if (!(weight_decay >= 0.0)) throw ValidationError("weight decay must be >= 0");
    if (!(grad_clip_norm >= 0.0)) throw ValidationError("gradient clip norm must be >= 0");
  }
};

/// Step learning-rate schedule: base * factor^floor((epoch - 1) / interval), epochs counted from 1.
struct StepSchedule {
  double base = 1e-3;
  double factor = 0.95;
  std::size_t interval = 3;

  void validate() const {
    if (!(base > 0.0)) throw ValidationError("base learning rate must be > 0");
    if (!(factor > 0.0)) throw ValidationError("learning-rate factor must be > 0");
    if (interval == 0) throw ValidationError("learning-rate interval must be >= 1");
  }

  double at(std::size_t epoch) const {
    if (epoch == 0) throw ValidationError("epochs are counted from 1");
    return base * std::pow(factor, static_cast<double>((epoch - 1) / interval));
  }
};

/// Adam with decoupled weight decay:
///   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2
///   p -= lr * (wd * p + m_hat / (sqrt(v_hat) + eps))
class AdamW {
 public:
  AdamW(const model::ModelParams& mp, AdamWConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    for (const auto& p : mp.params) {
      m_.emplace_back(p.value.shape());
      v_.emplace_back(p.value.shape());
    }
  }

  void set_lr(double lr) {
    if (!(lr > 0.0)) throw ValidationError("learning rate must be > 0");
    cfg_.lr = lr;
  }
  double lr() const noexcept { return cfg_.lr; }
  std::size_t steps() const noexcept { return t_; }
  const AdamWConfig& config() const noexcept { return cfg_; }
  const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor>& second_moments() const noexcept { return v_; }

  /// Restores moments and step count, e.g. from a checkpoint.
  void restore(std::vector<Tensor> m, std::vector<Tensor> v, std::size_t t) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw ShapeError("optimizer state size mismatch");
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i].shape() != m_[i].shape() || v[i].shape() != v_[i].shape()) {
        throw ShapeError("optimizer state shape mismatch");
      }
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
  }

  /// Returns the global gradient norm before any clipping.
  double step(model::ModelParams& mp, const std::vector<Tensor>& grads) {
    if (grads.size() != mp.params.size()) throw ShapeError("one gradient per parameter required");
    double sq = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (grads[i].shape() != mp.params[i].value.shape()) {
        throw ShapeError("gradient shape mismatch for " + mp.params[i].name);
      }
      for (double g : grads[i].data()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient");
    const double scale = cfg_.grad_clip_norm > 0.0 && norm > cfg_.grad_clip_norm ? cfg_.grad_clip_norm / norm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < grads.size(); ++i) {
      Tensor& p = mp.params[i].value;
      const double* g = grads[i].ptr();
      double* m = m_[i].ptr();
      double* v = v_[i].ptr();
      double* w = p.ptr();
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double gj = g[j] * scale;
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        const double mh = m[j] / bc1, vh = v[j] / bc2;
        w[j] -= cfg_.lr * (cfg_.weight_decay * w[j] + mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
    return norm;
  }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace datwep::optim

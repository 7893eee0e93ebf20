#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "corona/common.hpp"

namespace corona {

struct AdamConfig {
  double lr = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over an ordered list of tensors; moment buffers are created lazily on
// the first step and must see the same tensor shapes afterwards.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(std::span<Matrix* const> params, std::span<const Matrix* const> grads) {
    if (params.size() != grads.size()) throw ValidationError("Adam: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (const Matrix* p : params) {
        m_.push_back(Matrix::Zero(p->rows(), p->cols()));
        v_.push_back(Matrix::Zero(p->rows(), p->cols()));
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Matrix& g = *grads[i];
      if (g.rows() != params[i]->rows() || g.cols() != params[i]->cols() || m_[i].size() != g.size())
        throw ValidationError("Adam: tensor shape changed between steps");
      m_[i] = b1 * m_[i] + (1.0 - b1) * g;
      v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
      params[i]->array() -= (cfg_.lr / c1) * m_[i].array() / ((v_[i].array() / c2).sqrt() + cfg_.eps);
    }
  }

  std::size_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Matrix> m_, v_;
};

// Patience counter over validation evaluations. Only strict improvement resets it.
class EarlyStopping {
 public:
  EarlyStopping(std::size_t patience, bool higher_is_better) : patience_(patience), higher_(higher_is_better) {}

  // Returns true when `metric` is a new best.
  bool observe(double metric) {
    ++evaluations_;
    const bool better = !has_best_ || (higher_ ? metric > best_ : metric < best_);
    if (better) {
      best_ = metric;
      has_best_ = true;
      since_best_ = 0;
    } else {
      ++since_best_;
    }
    return better;
  }

  bool should_stop() const { return since_best_ >= patience_; }
  double best() const { return best_; }
  std::size_t evaluations() const { return evaluations_; }
  std::size_t since_best() const { return since_best_; }

 private:
  std::size_t patience_;
  bool higher_;
  bool has_best_ = false;
  double best_ = 0.0;
  std::size_t since_best_ = 0;
  std::size_t evaluations_ = 0;
};

}  // namespace corona

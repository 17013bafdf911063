#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "lilora/errors.hpp"
#include "lilora/linalg.hpp"

namespace lilora {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are created on the first step and
/// keep the shapes of their parameters.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {
    if (!(cfg.lr > 0.0)) throw ConfigError("learning rate must be positive");
  }

  void step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads) {
    if (params.size() != grads.size()) throw ShapeError("Adam: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (const Matrix* p : params) {
        m_.emplace_back(p->rows(), p->cols());
        v_.emplace_back(p->rows(), p->cols());
      }
    }
    if (m_.size() != params.size()) throw ShapeError("Adam: parameter set changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix& p = *params[i];
      const Matrix& g = *grads[i];
      require_same_shape(p, g, "Adam");
      require_same_shape(p, m_[i], "Adam moments");
      for (std::size_t j = 0; j < p.size(); ++j) {
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g[j];
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double mhat = m_[i][j] / c1;
        const double vhat = v_[i][j] / c2;
        p[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  std::int64_t steps() const noexcept { return t_; }
  const std::vector<Matrix>& first_moments() const noexcept { return m_; }
  const std::vector<Matrix>& second_moments() const noexcept { return v_; }

 private:
  AdamConfig cfg_;
  std::vector<Matrix> m_, v_;
  std::int64_t t_ = 0;
};

/// Fisher-Yates shuffle of 0..n-1 driven by `rng`.
inline std::vector<std::size_t> permutation(Rng& rng, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

/// Consecutive mini-batches over a shuffled index list; the last may be short.
inline std::vector<std::vector<std::size_t>> minibatches(const std::vector<std::size_t>& order, std::size_t batch) {
  if (batch == 0) throw ConfigError("batch size must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < order.size(); s += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + batch)));
  return out;
}

}  // namespace lilora

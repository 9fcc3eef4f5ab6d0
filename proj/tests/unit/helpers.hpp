#pragma once

#include <functional>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "stae/grad_check.hpp"
#include "stae/tensor.hpp"

namespace stae::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, bool requires_grad = false, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = normal(rng);
  return Tensor(shape, std::move(v), requires_grad);
}

// Weighted sum against fixed random weights: a generic scalar probe whose
// gradient exercises every output entry differently.
inline Tensor probe_loss(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

inline void expect_gradients_match(const std::function<Tensor()>& loss, std::vector<NamedParam> params,
                                   double tol = 1e-4) {
  const GradCheckReport report = grad_check(loss, std::move(params), 1e-5, tol);
  for (const auto& e : report.entries) {
    EXPECT_LT(e.max_rel_error, tol) << e.name << " worst index " << e.worst_index << " analytic " << e.analytic
                                    << " numeric " << e.numeric;
  }
}

inline std::vector<double> to_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace stae::testing

// SPDX-License-Identifier: Apache-2.0
// Shared helpers for the unit and acceptance tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "smd/common/rng.hpp"
#include "smd/numcore/ops.hpp"
#include "smd/numcore/tensor.hpp"

namespace smd::testing {

inline num::Tensor random_tensor(num::Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> data(num::shape_numel(shape));
  for (auto& x : data) x = scale * standard_normal(rng);
  return num::Tensor::from(std::move(shape), std::move(data), requires_grad);
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps entries whose true
/// gradient is ~0 from turning finite-difference roundoff into a huge ratio.
inline double relative_error(double a, double b, double floor = 1e-5) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

/// Largest relative error between backward() gradients of the scalar f and
/// central differences with step eps, over every element of every input.
inline double gradcheck(const std::function<num::Tensor()>& f, std::vector<num::Tensor> inputs, double eps = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  num::backward(f());
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }
  double worst = 0.0;
  num::NoGradGuard guard;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double up = f().item();
      data[i] = saved - eps;
      const double down = f().item();
      data[i] = saved;
      worst = std::max(worst, relative_error(analytic[k][i], (up - down) / (2.0 * eps)));
    }
  }
  return worst;
}

/// Weighted sum with fixed random weights, so a gradcheck sees every output
/// element with a distinct coefficient.
inline num::Tensor probe(const num::Tensor& y, const num::Tensor& weights) {
  return num::sum(num::mul(y, weights));
}

}  // namespace smd::testing

#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "cyformer/tensor.hpp"

namespace testing {

inline std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <typename T = double>
cyformer::Tensor<T> random_tensor(std::mt19937_64& rng, cyformer::Shape shape, bool grad = false,
                                  double scale = 1.0) {
  const auto n = cyformer::shape_numel(shape);
  const auto v = random_values(rng, n, scale);
  return cyformer::Tensor<T>::from(std::move(shape), std::vector<T>(v.begin(), v.end()), grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

} // namespace testing

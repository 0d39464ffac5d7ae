#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cyformer/tensor.hpp"

namespace cyformer {

struct GradcheckReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  // Coordinates whose +/- perturbation moved some ReLU input or MAE residual
  // across zero. Central differences are meaningless there.
  std::size_t skipped_kinks = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradcheckOptions {
  double step = 1e-5;
  // 0 checks every coordinate; otherwise at most this many per parameter,
  // drawn without replacement from a seeded generator.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  // Symmetric five-point stencil (-f(+2h) + 8f(+h) - 8f(-h) + f(-2h)) / 12h
  // instead of the three-point one. Truncation drops from O(h^2) to O(h^4),
  // which allows a step large enough to keep roundoff small.
  bool fourth_order = false;
};

// Compares the taped gradient of `loss_fn` against central differences.
// A coordinate is skipped when any probe changes the kink fingerprint.
// Per coordinate: |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// `loss_fn` must be deterministic and return a single-element tensor. The
// parameters' grad buffers are overwritten.
template <typename T>
GradcheckReport finite_diff_gradcheck(const std::function<Tensor<T>()>& loss_fn,
                                      const std::vector<Parameter<T>>& params,
                                      const GradcheckOptions& options = {});

} // namespace cyformer

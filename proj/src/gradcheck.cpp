#include "cyformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cyformer/errors.hpp"

namespace cyformer {

namespace {

struct Probe {
  double value;
  std::size_t fingerprint;
};

template <typename T>
Probe evaluate(const std::function<Tensor<T>()>& loss_fn) {
  KinkMonitor monitor;
  KinkMonitor::set_active(&monitor);
  double value = 0.0;
  try {
    value = static_cast<double>(loss_fn().item());
  } catch (...) {
    KinkMonitor::set_active(nullptr);
    throw;
  }
  KinkMonitor::set_active(nullptr);
  return {value, monitor.fingerprint()};
}

} // namespace

template <typename T>
GradcheckReport finite_diff_gradcheck(const std::function<Tensor<T>()>& loss_fn,
                                      const std::vector<Parameter<T>>& params,
                                      const GradcheckOptions& options) {
  if (!(options.step > 0.0)) throw ContractError("gradcheck step must be positive");

  std::vector<Tensor<T>> tensors;
  for (const auto& p : params) {
    Tensor<T> t = p.tensor;
    t.set_requires_grad(true);
    t.zero_grad();
    tensors.push_back(t);
  }
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    auto loss = loss_fn();
    tape.backward(loss);
  }

  const std::size_t base_fp = evaluate(loss_fn).fingerprint;
  const T h = static_cast<T>(options.step);
  std::mt19937_64 rng(options.seed);
  GradcheckReport report;

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T> t = tensors[pi];
    std::vector<std::size_t> coords(t.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_param > 0 && coords.size() > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (auto idx : coords) {
      const T original = t.data()[idx];
      auto probe = [&](double k) {
        t.data()[idx] = original + static_cast<T>(k) * h;
        return evaluate(loss_fn);
      };
      const Probe p1 = probe(1), m1 = probe(-1);
      bool kink = p1.fingerprint != base_fp || m1.fingerprint != base_fp;
      double numeric = (p1.value - m1.value) / (2.0 * options.step);
      if (options.fourth_order && !kink) {
        const Probe p2 = probe(2), m2 = probe(-2);
        kink = p2.fingerprint != base_fp || m2.fingerprint != base_fp;
        numeric = (8.0 * (p1.value - m1.value) - (p2.value - m2.value)) / (12.0 * options.step);
      }
      t.data()[idx] = original;
      if (kink) {
        ++report.skipped_kinks;
        continue;
      }
      const double analytic = static_cast<double>(t.grad()[idx]);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_err || report.checked == 1) {
        report.max_rel_err = std::max(report.max_rel_err, rel);
        if (rel >= report.max_rel_err) {
          report.worst_param = params[pi].name;
          report.worst_index = idx;
          report.worst_analytic = analytic;
          report.worst_numeric = numeric;
        }
      }
    }
  }
  return report;
}

template GradcheckReport finite_diff_gradcheck<float>(const std::function<Tensor<float>()>&,
                                                      const std::vector<Parameter<float>>&,
                                                      const GradcheckOptions&);
template GradcheckReport finite_diff_gradcheck<double>(const std::function<Tensor<double>()>&,
                                                       const std::vector<Parameter<double>>&,
                                                       const GradcheckOptions&);

} // namespace cyformer

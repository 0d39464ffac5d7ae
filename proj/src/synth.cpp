#include "cyformer/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "cyformer/errors.hpp"

namespace cyformer {

namespace {

struct Condition {
  double current_a;
  double ambient_c;
};

struct FadeParams {
  double soh0;
  double linear;
  double expo;
  double curvature;
  double r0;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::vector<double> soh_curve(std::mt19937_64& rng, std::size_t cycles, const FadeParams& f) {
  std::vector<double> soh(cycles);
  const double n = static_cast<double>(cycles);
  for (std::size_t k = 0; k < cycles; ++k) {
    const double x = static_cast<double>(k) / n;
    soh[k] = f.soh0 - f.linear * x -
             f.expo * (std::exp(f.curvature * x) - 1.0) / (std::exp(f.curvature) - 1.0);
  }
  // Regeneration after rest periods: a jump that decays over a few cycles.
  std::size_t k = static_cast<std::size_t>(uniform(rng, 10, 25));
  while (k < cycles) {
    const double amp = uniform(rng, 0.008, 0.022);
    const double tau = uniform(rng, 1.5, 4.0);
    for (std::size_t j = k; j < cycles; ++j)
      soh[j] += amp * std::exp(-static_cast<double>(j - k) / tau);
    k += static_cast<std::size_t>(uniform(rng, 14, 30));
  }
  std::normal_distribution<double> noise(0.0, 0.0015);
  for (auto& s : soh) s += noise(rng);
  return soh;
}

CycleRecord discharge_cycle(std::mt19937_64& rng, int index, double soh, double rated,
                            const Condition& cond, const FadeParams& f,
                            const SynthOptions& opt) {
  CycleRecord rec;
  rec.cycle_index = index;
  rec.capacity_ah = soh * rated;

  const double current = cond.current_a;
  const double resistance = f.r0 * (1.0 + 8.0 * std::max(0.0, 1.0 - soh));
  const double duration = rec.capacity_ah * 3600.0 / current;
  const double knee = 6.0 + 14.0 * soh;

  const auto n = static_cast<std::size_t>(
      uniform(rng, static_cast<double>(opt.min_raw_samples), static_cast<double>(opt.max_raw_samples) + 1));
  std::vector<double> times(n);
  times.front() = 0.0;
  times.back() = duration;
  for (std::size_t i = 1; i + 1 < n; ++i) times[i] = uniform(rng, 0.0, duration);
  std::sort(times.begin() + 1, times.end() - 1);
  for (std::size_t i = 1; i < n; ++i)
    times[i] = std::max(times[i], times[i - 1] + 1e-3 * duration / static_cast<double>(n));
  times.back() = std::max(times.back(), duration);

  std::normal_distribution<double> v_noise(0.0, 0.002);
  std::normal_distribution<double> i_noise(0.0, 0.003);
  std::normal_distribution<double> t_noise(0.0, 0.05);
  for (double t : times) {
    const double u = std::min(1.0, t / times.back());
    const double ocv = 4.15 - 0.12 * (1.0 - std::exp(-15.0 * u)) - 0.40 * u -
                       0.50 * std::pow(u, knee);
    Sample s;
    s.time_s = t;
    s.vm = ocv - current * resistance + v_noise(rng);
    s.cm = -current + i_noise(rng);
    s.cl = current + i_noise(rng);
    s.vl = 0.96 * s.vm - 0.05 * current * (1.0 - soh) + v_noise(rng);
    s.temp = cond.ambient_c + (2.0 + 6.0 * current * current * resistance) *
                                  (1.0 - std::exp(-2.5 * u)) +
             1.5 * std::pow(u, knee) + t_noise(rng);
    rec.samples.push_back(s);
  }
  return rec;
}

} // namespace

std::vector<BatteryHistory> generate_synthetic_fleet(const SynthOptions& opt) {
  if (opt.n_source == 0) throw ConfigError("synthetic fleet needs at least one source battery");
  if (opt.min_cycles < 4 || opt.max_cycles < opt.min_cycles)
    throw ConfigError("synthetic cycle range is invalid");
  if (opt.min_raw_samples < 2 || opt.max_raw_samples < opt.min_raw_samples)
    throw ConfigError("synthetic raw sample range is invalid");

  std::mt19937_64 rng(opt.seed);
  static constexpr double kCurrents[] = {1.0, 2.0, 1.5, 2.5};
  static constexpr double kAmbients[] = {24.0, 43.0, 4.0};

  std::vector<BatteryHistory> fleet;
  for (std::size_t b = 0; b <= opt.n_source; ++b) {
    const bool target = b == opt.n_source;
    Condition cond = target ? Condition{1.75, 30.0}
                            : Condition{kCurrents[b % 4], kAmbients[b % 3]};
    FadeParams f{uniform(rng, 0.93, 0.99), uniform(rng, 0.06, 0.14), uniform(rng, 0.05, 0.14),
                 uniform(rng, 1.5, 3.0), uniform(rng, 0.07, 0.10)};
    const auto cycles = static_cast<std::size_t>(
        uniform(rng, static_cast<double>(opt.min_cycles), static_cast<double>(opt.max_cycles) + 1));
    const auto soh = soh_curve(rng, cycles, f);

    BatteryHistory h;
    char id[16];
    std::snprintf(id, sizeof(id), target ? "T%02zu" : "S%02zu", target ? std::size_t{1} : b + 1);
    h.battery_id = id;
    h.rated_capacity_ah = opt.rated_capacity_ah;
    for (std::size_t k = 0; k < cycles; ++k)
      h.cycles.push_back(discharge_cycle(rng, static_cast<int>(k + 1), soh[k],
                                         opt.rated_capacity_ah, cond, f, opt));
    fleet.push_back(std::move(h));
  }
  return fleet;
}

} // namespace cyformer

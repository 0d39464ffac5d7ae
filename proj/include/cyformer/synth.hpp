#pragma once

#include <cstdint>
#include <vector>

#include "cyformer/battery.hpp"

namespace cyformer {

// Synthetic discharge histories for desk-scale experiments. Each battery has
// its own discharge current, ambient temperature and fade parameters. The
// capacity curve is an exponential fade with occasional regeneration bumps
// that decay over a few cycles. Waveforms carry the SoH through the
// internal-resistance voltage drop, the knee of the voltage curve and the
// temperature rise, so health is observable from the resampled inputs.
struct SynthOptions {
  std::uint64_t seed = 7;
  std::size_t n_source = 6;
  std::size_t min_cycles = 90;
  std::size_t max_cycles = 120;
  std::size_t min_raw_samples = 60;
  std::size_t max_raw_samples = 110;
  double rated_capacity_ah = 2.0;
};

// n_source source batteries ("S01".."S06") followed by one target ("T01")
// operated at a condition none of the sources share.
std::vector<BatteryHistory> generate_synthetic_fleet(const SynthOptions& options);

} // namespace cyformer

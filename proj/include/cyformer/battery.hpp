#pragma once

// Battery cycle data: canonical CSV ingestion, SoH, intra-cycle resampling,
// channel normalization, sliding windows and the fine-tune / hidden split of
// the target battery.
//
// Canonical CSV, one file per battery, UTF-8, '.' decimals, LF endings:
//
//   battery_id,rated_capacity_ah,cycle,capacity_ah,time_s,vm_v,cm_a,vl_v,cl_a,temp_c
//
// One row per sample; rows grouped by cycle (1, 2, ... contiguous), time
// strictly ascending inside a cycle, capacity_ah repeated on every row of its
// cycle.

#include <array>
#include <cstddef>
#include <istream>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "cyformer/tensor.hpp"

namespace cyformer {

// Model channel order.
enum Channel : std::size_t { kCm = 0, kVm = 1, kCl = 2, kVl = 3, kTemp = 4 };
inline constexpr std::size_t kNumChannels = 5;
inline constexpr const char* kCanonicalHeader =
    "battery_id,rated_capacity_ah,cycle,capacity_ah,time_s,vm_v,cm_a,vl_v,cl_a,temp_c";

struct Sample {
  double time_s = 0;
  double vm = 0; // volts
  double cm = 0; // amperes
  double vl = 0; // volts
  double cl = 0; // amperes
  double temp = 0; // degrees C

  std::array<double, kNumChannels> channels() const { return {cm, vm, cl, vl, temp}; }
};

struct CycleRecord {
  int cycle_index = 0; // 1-based
  std::vector<Sample> samples;
  // NaN when the file carries no label for this cycle (prediction inputs).
  double capacity_ah = std::numeric_limits<double>::quiet_NaN();

  bool labeled() const { return capacity_ah == capacity_ah; }
};

struct BatteryHistory {
  std::string battery_id;
  double rated_capacity_ah = 0;
  std::vector<CycleRecord> cycles;

  std::size_t size() const { return cycles.size(); }
  // SoH fraction per cycle (NaN for unlabeled cycles).
  std::vector<double> soh() const;
};

struct LoadOptions {
  // When false, an empty capacity_ah field is accepted and leaves the cycle
  // unlabeled.
  bool require_capacity = true;
};

// Throws DataError naming the offending line on any schema violation.
BatteryHistory parse_canonical_csv(std::istream& in, const std::string& source_name,
                                   const LoadOptions& options = {});
BatteryHistory load_canonical_csv(const std::string& path, const LoadOptions& options = {});
void write_canonical_csv(const std::string& path, const BatteryHistory& history);

// Q_max / C_r as a fraction. ContractError unless both are positive.
double compute_soh(double capacity_ah, double rated_capacity_ah);

// Linear interpolation of every channel onto l_sample points uniformly spaced
// over [t_first, t_last]. Result is [l_sample x kNumChannels]; the endpoints
// reproduce the first and last samples exactly.
Tensor<double> resample_cycle(const CycleRecord& record, std::size_t l_sample);

struct NormalizationStats {
  std::array<double, kNumChannels> mean{};
  std::array<double, kNumChannels> stddev{};

  // Hex digest of the exact mean/std bit patterns.
  std::string fingerprint() const;
  nlohmann::json to_json() const;
  static NormalizationStats from_json(const nlohmann::json& j);
};

// Per-channel z-score statistics over every resampled point of every source
// cycle (population std). ConfigError for a zero-variance channel.
NormalizationStats fit_normalizer(const std::vector<BatteryHistory>& source, std::size_t l_sample);
NormalizationStats fit_normalizer(const std::vector<Tensor<double>>& resampled_cycles);

// x is [.. x kNumChannels].
Tensor<double> apply_normalizer(const Tensor<double>& x, const NormalizationStats& stats);
Tensor<double> invert_normalizer(const Tensor<double>& x, const NormalizationStats& stats);

// A battery resampled and normalized once, ready to be cut into windows.
struct PreparedBattery {
  std::string battery_id;
  std::size_t l_sample = 0;
  std::vector<float> cycles; // [T x l_sample x kNumChannels], normalized
  std::vector<double> soh;   // [T]
  std::string stats_fingerprint;

  std::size_t size() const { return soh.size(); }
};

PreparedBattery prepare_battery(const BatteryHistory& history, std::size_t l_sample,
                                const NormalizationStats& stats);

struct WindowedExample {
  std::vector<float> input;        // [n_in x l_sample x kNumChannels]
  std::vector<double> target;      // [n_out] SoH fractions (NaN if unlabeled)
  std::vector<int> target_cycles;  // 1-based cycles the targets belong to
  int source_cycle = 0;            // t, the last input cycle (1-based)
  std::string battery_id;
  std::string stats_fingerprint;
};

// Windows with last input cycle t in [first_t, last_t] (1-based, clamped to
// the admissible range [n_in, T - n_out]).
std::vector<WindowedExample> make_windows(const PreparedBattery& battery, std::size_t n_in,
                                          std::size_t n_out, std::size_t first_t,
                                          std::size_t last_t);

// Every admissible window, stride 1. Too-short histories give an empty list
// and a logged warning.
std::vector<WindowedExample> make_windows(const PreparedBattery& battery, std::size_t n_in,
                                          std::size_t n_out);
std::vector<WindowedExample> make_windows(const BatteryHistory& history, std::size_t n_in,
                                          std::size_t n_out, const NormalizationStats& stats,
                                          std::size_t l_sample);

struct TargetSplit {
  std::size_t total_cycles = 0;
  std::size_t finetune_cycles = 0; // cycles 1..finetune_cycles
  std::size_t hidden_cycles = 0;   // the rest
  bool promoted = false;           // raised to n_in + n_out
};

// finetune = floor(fraction * T), raised to n_in + n_out (with a warning) when
// smaller. ContractError for fraction outside (0, 1); ConfigError when no
// hidden window would remain.
TargetSplit split_target(std::size_t total_cycles, double finetune_fraction, std::size_t n_in,
                         std::size_t n_out);

// Fine-tune windows have every target inside the fine-tune segment; hidden
// windows have every target inside the hidden segment. Inputs may straddle.
std::vector<WindowedExample> finetune_windows(const PreparedBattery& battery,
                                              const TargetSplit& split, std::size_t n_in,
                                              std::size_t n_out);
std::vector<WindowedExample> hidden_windows(const PreparedBattery& battery,
                                            const TargetSplit& split, std::size_t n_in,
                                            std::size_t n_out);

} // namespace cyformer

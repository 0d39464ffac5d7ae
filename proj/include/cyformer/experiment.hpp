#pragma once

// Experiment plumbing shared by the command-line tool and the tests.
//
// Config file (JSON, every key optional):
//
//   {
//     "seed": 0,
//     "out": "runs/default",
//     "data": {"battery_files": [...], "data_dir": "...", "target_id": "T01",
//              "finetune_fraction": 0.1},
//     "model": {ModelConfig fields},
//     "train": {TrainConfig fields},
//     "prune": {"depths": [1, 2, 3, 4], "l_samples": [16, 24, 32]},
//     "synth": {SynthOptions fields}
//   }
//
// The top-level seed drives model initialization and the batch shuffle; it
// overrides train.seed.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "cyformer/battery.hpp"
#include "cyformer/gradcheck.hpp"
#include "cyformer/model.hpp"
#include "cyformer/synth.hpp"
#include "cyformer/train.hpp"

namespace cyformer {

struct DataConfig {
  std::vector<std::string> battery_files;
  // Every *.csv in this directory is added to battery_files (sorted by name).
  std::string data_dir;
  std::string target_id = "T01";
  double finetune_fraction = 0.1;
};

struct PruneConfig {
  std::vector<std::size_t> depths{1, 2, 3, 4};
  std::vector<std::size_t> l_samples{16, 24, 32};
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  PruneConfig prune;
  SynthOptions synth;

  // ConfigError on invalid values; also propagates seed into train.seed.
  void resolve();
};

nlohmann::json experiment_config_to_json(const ExperimentConfig& config);
// Unknown keys are a ConfigError. The result is resolved.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);

struct Dataset {
  std::vector<BatteryHistory> sources; // file order
  BatteryHistory target;
};

// ConfigError when the target id is missing or ids repeat; DataError from the
// CSV reader.
Dataset load_dataset(const DataConfig& config);

struct PipelineResult {
  NormalizationStats stats;
  TargetSplit split;
  TrainHistory source_history;
  TrainHistory finetune_history;
  MetricsReport metrics;
  std::size_t source_windows = 0;
  std::size_t finetune_windows = 0;
};

// Source training, fine-tuning on the leading fraction of the target and
// evaluation on the hidden rest, all in memory.
PipelineResult run_pipeline(const Dataset& data, const ExperimentConfig& config);

struct PruneRow {
  std::string variant; // "depth=3" or "l_sample=24"
  ModelConfig model;
  std::uint64_t flops = 0;
  std::size_t params = 0;
  MetricsReport metrics;
};

std::vector<PruneRow> prune_sweep(const Dataset& data, const ExperimentConfig& config);
std::string prune_table_csv(const std::vector<PruneRow>& rows);

// Float64 finite-difference check of the full model plus MAE loss.
GradcheckReport gradcheck_model(const ModelConfig& config, std::uint64_t seed);
ModelConfig gradcheck_tiny_config();

// Exit codes of run().
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitCheckFailed = 3;

// args excludes the program name, e.g. {"train", "--config", "c.json"}.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace cyformer

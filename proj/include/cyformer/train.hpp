#pragma once

// Two-stage transfer learning: mini-batch Adam on the pooled source windows,
// then a fresh Adam run at the fine-tuning rate on the target's fine-tune
// segment. MAE is the training loss; a single step decay by gamma happens at
// milestone_fraction of the epochs.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cyformer/battery.hpp"
#include "cyformer/model.hpp"

namespace cyformer {

struct TrainConfig {
  double lr_train = 1e-4;
  double lr_finetune = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double gamma = 0.1;
  double milestone_fraction = 2.0 / 3.0;
  std::size_t batch_size = 32;
  std::size_t epochs = 1500;
  std::size_t finetune_epochs = 200;
  std::uint64_t seed = 0;
  // Fine-tune only the decoder side (queries, decoder layers, scalar head).
  bool freeze_encoder = false;
  // Hold the last source battery out of stage 1 and track its MAE per epoch.
  bool validate_last_source = false;
  // Progress log period in epochs; 0 disables.
  std::size_t log_every = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

// base_lr before the milestone epoch, base_lr * gamma from it on (inclusive).
// The milestone is ceil(milestone_fraction * epochs).
double lr_schedule(std::size_t epoch, std::size_t epochs, double milestone_fraction, double gamma,
                   double base_lr);

// mean |pred - target|; the subgradient at a tie is 0.
template <typename T>
Tensor<T> mae_loss(const Tensor<T>& pred, const Tensor<T>& target);

template <typename T>
class Adam {
public:
  Adam(std::vector<Parameter<T>> params, double beta1, double beta2, double eps);

  // One bias-corrected update of every parameter not marked frozen.
  // ContractError if a trainable parameter has no gradient buffer.
  void step(double lr);
  void freeze(const std::function<bool(const std::string&)>& predicate);

  std::size_t steps() const { return step_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

private:
  std::vector<Parameter<T>> params_;
  std::vector<bool> frozen_;
  std::vector<std::vector<T>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t step_ = 0;
};

struct TrainHistory {
  std::vector<double> train_loss;   // mean MAE per epoch
  std::vector<double> val_mae;      // per epoch, when a validation set was given
  std::vector<double> learning_rate;
  std::size_t optimizer_steps = 0;  // steps taken by this stage's optimizer
};

// Batched model input [B x n_in x l x c] and targets [B x n_out].
template <typename T>
Tensor<T> stack_inputs(const std::vector<const WindowedExample*>& batch, const ModelConfig& cfg);
template <typename T>
Tensor<T> stack_targets(const std::vector<const WindowedExample*>& batch, const ModelConfig& cfg);

// Stage 1. Seeded per-epoch shuffle of the pooled windows; deterministic.
// Throws ConfigError for an empty pool.
template <typename T>
TrainHistory train_source(CyFormer<T>& model, const std::vector<WindowedExample>& windows,
                          const TrainConfig& config,
                          const std::vector<WindowedExample>* validation = nullptr);

// Stage 2 with a fresh optimizer at lr_finetune for finetune_epochs.
template <typename T>
TrainHistory finetune_target(CyFormer<T>& model, const std::vector<WindowedExample>& windows,
                             const TrainConfig& config);

// Model outputs for every window, [windows x n_out] row-major.
template <typename T>
std::vector<double> predict_windows(const CyFormer<T>& model,
                                    const std::vector<WindowedExample>& windows,
                                    std::size_t batch_size = 64);

struct PredictionPair {
  int cycle = 0;
  double soh_true = 0; // NaN when unlabeled
  double soh_pred = 0;
};

struct MetricsReport {
  double mae = 0;
  double mape = 0;
  double rmse = 0;
  std::size_t n = 0;
  std::vector<PredictionPair> pairs;
};

// MAE, MAPE, RMSE as fractions over the paired values. ContractError when
// empty or sizes differ; DataError when some |y| < 1e-6.
MetricsReport compute_metrics(const std::vector<double>& y_true, const std::vector<double>& y_pred);

// Metrics over every target of every window, pairs in window order.
template <typename T>
MetricsReport evaluate_metrics(const CyFormer<T>& model,
                               const std::vector<WindowedExample>& windows);

// One prediction per reachable cycle, ascending; where horizons overlap the
// prediction with the smallest offset wins. Empty (with a warning) when the
// battery is shorter than n_in + n_out.
template <typename T>
std::vector<PredictionPair> predict_series(const CyFormer<T>& model, const PreparedBattery& battery);

// "key=value" lines: fractions plus percent strings.
std::string metrics_to_text(const MetricsReport& report);
nlohmann::json metrics_to_json(const MetricsReport& report);
// cycle,soh_true,soh_pred
std::string predictions_to_csv(const std::vector<PredictionPair>& pairs);

} // namespace cyformer

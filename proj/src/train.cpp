#include "cyformer/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include <spdlog/spdlog.h>

#include "cyformer/errors.hpp"

namespace cyformer {

using nlohmann::json;

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0)) throw ConfigError(std::string("train.") + name + " must be positive");
  };
  positive(lr_train, "lr_train");
  positive(lr_finetune, "lr_finetune");
  positive(adam_eps, "adam_eps");
  positive(gamma, "gamma");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1))
    throw ConfigError("train.beta1 and train.beta2 must be in (0, 1)");
  if (!(milestone_fraction > 0 && milestone_fraction <= 1))
    throw ConfigError("train.milestone_fraction must be in (0, 1]");
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
}

json train_config_to_json(const TrainConfig& c) {
  return json{{"lr_train", c.lr_train},
              {"lr_finetune", c.lr_finetune},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"gamma", c.gamma},
              {"milestone_fraction", c.milestone_fraction},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"finetune_epochs", c.finetune_epochs},
              {"seed", c.seed},
              {"freeze_encoder", c.freeze_encoder},
              {"validate_last_source", c.validate_last_source},
              {"log_every", c.log_every}};
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  static const std::set<std::string> known = {
      "lr_train",   "lr_finetune",     "beta1",          "beta2",
      "adam_eps",   "gamma",           "milestone_fraction", "batch_size",
      "epochs",     "finetune_epochs", "seed",           "freeze_encoder",
      "validate_last_source", "log_every"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown train config key '" + key + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get("lr_train", c.lr_train);
    get("lr_finetune", c.lr_finetune);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("adam_eps", c.adam_eps);
    get("gamma", c.gamma);
    get("milestone_fraction", c.milestone_fraction);
    get("batch_size", c.batch_size);
    get("epochs", c.epochs);
    get("finetune_epochs", c.finetune_epochs);
    get("seed", c.seed);
    get("freeze_encoder", c.freeze_encoder);
    get("validate_last_source", c.validate_last_source);
    get("log_every", c.log_every);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad train config value: ") + e.what());
  }
  c.validate();
  return c;
}

double lr_schedule(std::size_t epoch, std::size_t epochs, double milestone_fraction, double gamma,
                   double base_lr) {
  const auto milestone =
      static_cast<std::size_t>(std::ceil(milestone_fraction * static_cast<double>(epochs) - 1e-9));
  return epoch >= milestone ? base_lr * gamma : base_lr;
}

template <typename T>
Tensor<T> mae_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw DimensionError("mae_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
  const std::size_t n = pred.size();
  auto p = pred.data();
  auto y = target.data();
  T total = 0;
  auto* monitor = KinkMonitor::active();
  for (std::size_t i = 0; i < n; ++i) {
    total += std::abs(p[i] - y[i]);
    if (monitor) monitor->observe(static_cast<double>(p[i] - y[i]));
  }
  const bool rec = detail::needs_record<T>({&pred, &target});
  auto out = Tensor<T>::from({1}, {total / static_cast<T>(n)}, rec);
  if (rec) {
    active_tape<T>()->record("mae_loss", [pred, target, out, n]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] / static_cast<T>(n);
      auto p = pred.data();
      auto y = target.data();
      auto sign = [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); };
      if (pred.requires_grad()) {
        auto dp = pred.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) dp[i] += g * sign(p[i] - y[i]);
      }
      if (target.requires_grad()) {
        auto dy = target.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) dy[i] -= g * sign(p[i] - y[i]);
      }
    });
  }
  return out;
}

// ---- Adam ------------------------------------------------------------------

template <typename T>
Adam<T>::Adam(std::vector<Parameter<T>> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), frozen_(params_.size(), false), beta1_(beta1), beta2_(beta2),
      eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.size(), T(0));
    v_.emplace_back(p.tensor.size(), T(0));
  }
}

template <typename T>
void Adam<T>::freeze(const std::function<bool(const std::string&)>& predicate) {
  for (std::size_t i = 0; i < params_.size(); ++i) frozen_[i] = predicate(params_[i].name);
}

template <typename T>
void Adam<T>::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (!frozen_[i] && !params_[i].tensor.has_grad())
      throw ContractError("adam step: parameter '" + params_[i].name + "' has no gradient");
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (frozen_[i]) continue;
    Tensor<T> t = params_[i].tensor;
    auto w = t.data();
    auto g = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = beta1_ * static_cast<double>(m[j]) + (1.0 - beta1_) * gj;
      const double vj = beta2_ * static_cast<double>(v[j]) + (1.0 - beta2_) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps_);
      w[j] = static_cast<T>(static_cast<double>(w[j]) - update);
    }
  }
}

// ---- batching --------------------------------------------------------------

template <typename T>
Tensor<T> stack_inputs(const std::vector<const WindowedExample*>& batch, const ModelConfig& cfg) {
  const std::size_t per = cfg.n_in * cfg.l_sample * cfg.c;
  std::vector<T> data;
  data.reserve(batch.size() * per);
  for (const auto* ex : batch) {
    if (ex->input.size() != per)
      throw DimensionError("window of " + std::to_string(ex->input.size()) +
                           " values does not match model input n_in x l_sample x c = " +
                           std::to_string(per));
    for (auto v : ex->input) data.push_back(static_cast<T>(v));
  }
  return Tensor<T>::from({batch.size(), cfg.n_in, cfg.l_sample, cfg.c}, std::move(data));
}

template <typename T>
Tensor<T> stack_targets(const std::vector<const WindowedExample*>& batch, const ModelConfig& cfg) {
  std::vector<T> data;
  data.reserve(batch.size() * cfg.n_out);
  for (const auto* ex : batch) {
    if (ex->target.size() != cfg.n_out)
      throw DimensionError("window target length " + std::to_string(ex->target.size()) +
                           " does not match n_out = " + std::to_string(cfg.n_out));
    for (auto v : ex->target) data.push_back(static_cast<T>(v));
  }
  return Tensor<T>::from({batch.size(), cfg.n_out}, std::move(data));
}

namespace {

bool encoder_side(const std::string& name) {
  return name.rfind("embed.", 0) == 0 || name.rfind("encoder.", 0) == 0 ||
         name.rfind("enc_head.", 0) == 0;
}

template <typename T>
double mean_abs_error(const CyFormer<T>& model, const std::vector<WindowedExample>& windows) {
  const auto pred = predict_windows(model, windows);
  double total = 0;
  std::size_t n = 0;
  for (std::size_t w = 0; w < windows.size(); ++w)
    for (std::size_t j = 0; j < windows[w].target.size(); ++j) {
      total += std::abs(pred[w * model.config().n_out + j] - windows[w].target[j]);
      ++n;
    }
  return n ? total / static_cast<double>(n) : 0.0;
}

template <typename T>
TrainHistory run_stage(CyFormer<T>& model, const std::vector<WindowedExample>& windows,
                       const TrainConfig& cfg, std::size_t epochs, double base_lr, bool freeze,
                       std::uint64_t seed, const std::vector<WindowedExample>* validation,
                       const char* stage) {
  cfg.validate();
  if (windows.empty())
    throw ConfigError(std::string(stage) + ": no training windows (check n_in / n_out against "
                      "the battery lengths)");
  for (const auto& ex : windows)
    if (std::any_of(ex.target.begin(), ex.target.end(), [](double v) { return v != v; }))
      throw DataError(std::string(stage) + ": window ending at cycle " +
                      std::to_string(ex.source_cycle) + " of " + ex.battery_id +
                      " has no SoH label");

  Adam<T> adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps);
  if (freeze) adam.freeze(encoder_side);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  TrainHistory hist;
  std::vector<const WindowedExample*> batch;

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const double lr = lr_schedule(epoch, epochs, cfg.milestone_fraction, cfg.gamma, base_lr);
    // Fisher-Yates with an explicit draw so the order does not depend on the
    // standard library's shuffle.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(&windows[order[i]]);
      const auto x = stack_inputs<T>(batch, model.config());
      const auto y = stack_targets<T>(batch, model.config());

      model.zero_grads();
      Tape<T> tape;
      TapeScope<T> scope(tape);
      auto loss = mae_loss(model.forward(x), y);
      tape.backward(loss);
      adam.step(lr);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(end - start);
    }
    hist.train_loss.push_back(loss_sum / static_cast<double>(windows.size()));
    hist.learning_rate.push_back(lr);
    if (validation && !validation->empty())
      hist.val_mae.push_back(mean_abs_error(model, *validation));
    if (cfg.log_every && (epoch + 1) % cfg.log_every == 0)
      spdlog::info("{} epoch {}/{} lr {:.2e} loss {:.5f}{}", stage, epoch + 1, epochs, lr,
                   hist.train_loss.back(),
                   hist.val_mae.empty() ? std::string()
                                        : fmt::format(" val_mae {:.5f}", hist.val_mae.back()));
  }
  hist.optimizer_steps = adam.steps();
  return hist;
}

} // namespace

template <typename T>
TrainHistory train_source(CyFormer<T>& model, const std::vector<WindowedExample>& windows,
                          const TrainConfig& cfg, const std::vector<WindowedExample>* validation) {
  return run_stage(model, windows, cfg, cfg.epochs, cfg.lr_train, false, cfg.seed, validation,
                   "train");
}

template <typename T>
TrainHistory finetune_target(CyFormer<T>& model, const std::vector<WindowedExample>& windows,
                             const TrainConfig& cfg) {
  if (cfg.finetune_epochs == 0) {
    cfg.validate();
    return {};
  }
  // Distinct stream from stage 1 so both stages are reproducible on their own.
  return run_stage(model, windows, cfg, cfg.finetune_epochs, cfg.lr_finetune, cfg.freeze_encoder,
                   cfg.seed ^ 0x9e3779b97f4a7c15ULL, nullptr, "finetune");
}

template <typename T>
std::vector<double> predict_windows(const CyFormer<T>& model,
                                    const std::vector<WindowedExample>& windows,
                                    std::size_t batch_size) {
  const std::size_t n_out = model.config().n_out;
  std::vector<double> out(windows.size() * n_out);
  std::vector<const WindowedExample*> batch;
  for (std::size_t start = 0; start < windows.size(); start += batch_size) {
    const std::size_t end = std::min(windows.size(), start + batch_size);
    batch.clear();
    for (std::size_t i = start; i < end; ++i) batch.push_back(&windows[i]);
    const auto pred = model.forward(stack_inputs<T>(batch, model.config()));
    auto p = pred.data();
    for (std::size_t i = 0; i < p.size(); ++i) out[start * n_out + i] = static_cast<double>(p[i]);
  }
  return out;
}

template <typename T>
MetricsReport evaluate_metrics(const CyFormer<T>& model,
                               const std::vector<WindowedExample>& windows) {
  if (windows.empty()) throw ConfigError("evaluate: no hidden windows");
  const auto pred = predict_windows(model, windows);
  std::vector<double> y;
  std::vector<PredictionPair> pairs;
  for (const auto& ex : windows)
    for (std::size_t j = 0; j < ex.target.size(); ++j) {
      y.push_back(ex.target[j]);
      pairs.push_back({ex.target_cycles[j], ex.target[j], 0.0});
    }
  for (std::size_t i = 0; i < pairs.size(); ++i) pairs[i].soh_pred = pred[i];
  auto report = compute_metrics(y, pred);
  report.pairs = std::move(pairs);
  return report;
}

template <typename T>
std::vector<PredictionPair> predict_series(const CyFormer<T>& model,
                                           const PreparedBattery& battery) {
  const auto& cfg = model.config();
  if (battery.l_sample != cfg.l_sample)
    throw DimensionError("battery resampled to " + std::to_string(battery.l_sample) +
                         " points, model expects " + std::to_string(cfg.l_sample));
  const auto windows = make_windows(battery, cfg.n_in, cfg.n_out);
  if (windows.empty()) return {};
  const auto pred = predict_windows(model, windows);
  // cycle -> (offset, prediction); smallest offset wins
  std::vector<std::pair<std::size_t, double>> best(battery.size() + 1, {SIZE_MAX, 0.0});
  for (std::size_t w = 0; w < windows.size(); ++w)
    for (std::size_t j = 0; j < cfg.n_out; ++j) {
      const auto cycle = static_cast<std::size_t>(windows[w].target_cycles[j]);
      if (j < best[cycle].first) best[cycle] = {j, pred[w * cfg.n_out + j]};
    }
  std::vector<PredictionPair> out;
  for (std::size_t cycle = 1; cycle <= battery.size(); ++cycle)
    if (best[cycle].first != SIZE_MAX)
      out.push_back({static_cast<int>(cycle), battery.soh[cycle - 1], best[cycle].second});
  return out;
}

#define CYFORMER_INSTANTIATE(T)                                                                \
  template Tensor<T> mae_loss(const Tensor<T>&, const Tensor<T>&);                             \
  template class Adam<T>;                                                                      \
  template Tensor<T> stack_inputs<T>(const std::vector<const WindowedExample*>&,               \
                                     const ModelConfig&);                                      \
  template Tensor<T> stack_targets<T>(const std::vector<const WindowedExample*>&,              \
                                      const ModelConfig&);                                     \
  template TrainHistory train_source(CyFormer<T>&, const std::vector<WindowedExample>&,        \
                                     const TrainConfig&, const std::vector<WindowedExample>*); \
  template TrainHistory finetune_target(CyFormer<T>&, const std::vector<WindowedExample>&,     \
                                        const TrainConfig&);                                   \
  template std::vector<double> predict_windows(const CyFormer<T>&,                             \
                                               const std::vector<WindowedExample>&,            \
                                               std::size_t);                                   \
  template MetricsReport evaluate_metrics(const CyFormer<T>&,                                  \
                                          const std::vector<WindowedExample>&);                \
  template std::vector<PredictionPair> predict_series(const CyFormer<T>&, const PreparedBattery&);

CYFORMER_INSTANTIATE(float)
CYFORMER_INSTANTIATE(double)

#undef CYFORMER_INSTANTIATE

} // namespace cyformer

#include <cmath>
#include <sstream>

#include <fmt/format.h>

#include "cyformer/errors.hpp"
#include "cyformer/train.hpp"

namespace cyformer {

MetricsReport compute_metrics(const std::vector<double>& y_true, const std::vector<double>& y_pred) {
  if (y_true.empty()) throw ContractError("metrics need at least one value");
  if (y_true.size() != y_pred.size())
    throw ContractError("metrics: " + std::to_string(y_true.size()) + " labels vs " +
                        std::to_string(y_pred.size()) + " predictions");
  double abs_sum = 0, pct_sum = 0, sq_sum = 0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (!(std::abs(y_true[i]) >= 1e-6))
      throw DataError("metrics: label " + std::to_string(i) + " is zero or missing");
    const double e = y_pred[i] - y_true[i];
    abs_sum += std::abs(e);
    pct_sum += std::abs(e) / std::abs(y_true[i]);
    sq_sum += e * e;
  }
  const auto n = static_cast<double>(y_true.size());
  MetricsReport r;
  r.mae = abs_sum / n;
  r.mape = pct_sum / n;
  r.rmse = std::sqrt(sq_sum / n);
  r.n = y_true.size();
  return r;
}

namespace {

std::string percent(double fraction) { return fmt::format("{:.4f}%", 100.0 * fraction); }

} // namespace

std::string metrics_to_text(const MetricsReport& r) {
  return fmt::format("n={}\nmae={:.17g}\nmape={:.17g}\nrmse={:.17g}\nmae_percent={}\n"
                     "mape_percent={}\nrmse_percent={}\n",
                     r.n, r.mae, r.mape, r.rmse, percent(r.mae), percent(r.mape), percent(r.rmse));
}

nlohmann::json metrics_to_json(const MetricsReport& r) {
  return nlohmann::json{{"n", r.n},
                        {"mae", r.mae},
                        {"mape", r.mape},
                        {"rmse", r.rmse},
                        {"mae_percent", percent(r.mae)},
                        {"mape_percent", percent(r.mape)},
                        {"rmse_percent", percent(r.rmse)}};
}

std::string predictions_to_csv(const std::vector<PredictionPair>& pairs) {
  std::string out = "cycle,soh_true,soh_pred\n";
  for (const auto& p : pairs) {
    out += std::to_string(p.cycle);
    out += ',';
    if (p.soh_true == p.soh_true) out += fmt::format("{:.17g}", p.soh_true);
    out += fmt::format(",{:.17g}\n", p.soh_pred);
  }
  return out;
}

} // namespace cyformer

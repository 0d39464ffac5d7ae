#include "cyformer/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>

#include "CLI11.hpp"
#include <fmt/chrono.h>
#include <fmt/format.h>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "cyformer/checkpoint.hpp"
#include "cyformer/errors.hpp"

namespace cyformer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown " + where + " key '" + key + "'");
}

template <typename F>
void get_field(const json& j, const char* key, F& field, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<F>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

json synth_to_json(const SynthOptions& s) {
  return json{{"seed", s.seed},
              {"n_source", s.n_source},
              {"min_cycles", s.min_cycles},
              {"max_cycles", s.max_cycles},
              {"min_raw_samples", s.min_raw_samples},
              {"max_raw_samples", s.max_raw_samples},
              {"rated_capacity_ah", s.rated_capacity_ah}};
}

SynthOptions synth_from_json(const json& j) {
  reject_unknown(j,
                 {"seed", "n_source", "min_cycles", "max_cycles", "min_raw_samples",
                  "max_raw_samples", "rated_capacity_ah"},
                 "synth");
  SynthOptions s;
  get_field(j, "seed", s.seed, "synth");
  get_field(j, "n_source", s.n_source, "synth");
  get_field(j, "min_cycles", s.min_cycles, "synth");
  get_field(j, "max_cycles", s.max_cycles, "synth");
  get_field(j, "min_raw_samples", s.min_raw_samples, "synth");
  get_field(j, "max_raw_samples", s.max_raw_samples, "synth");
  get_field(j, "rated_capacity_ah", s.rated_capacity_ah, "synth");
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << text;
  if (!f) throw ConfigError("failed writing " + path.string());
}

std::string history_csv(const TrainHistory& h) {
  const bool val = !h.val_mae.empty();
  std::string out = val ? "epoch,learning_rate,train_loss,val_mae\n"
                        : "epoch,learning_rate,train_loss\n";
  for (std::size_t e = 0; e < h.train_loss.size(); ++e) {
    out += fmt::format("{},{:.17g},{:.17g}", e, h.learning_rate[e], h.train_loss[e]);
    if (val) out += fmt::format(",{:.17g}", h.val_mae[e]);
    out += '\n';
  }
  return out;
}

std::vector<WindowedExample> pool_windows(const std::vector<PreparedBattery>& batteries,
                                          const ModelConfig& m) {
  std::vector<WindowedExample> pool;
  for (const auto& b : batteries) {
    auto w = make_windows(b, m.n_in, m.n_out);
    pool.insert(pool.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return pool;
}

struct SourceStage {
  NormalizationStats stats;
  TrainHistory history;
  std::size_t windows = 0;
};

SourceStage train_stage(CyFormer<float>& model, const std::vector<BatteryHistory>& sources,
                        const ExperimentConfig& cfg) {
  if (sources.empty()) throw ConfigError("no source batteries");
  SourceStage s;
  s.stats = fit_normalizer(sources, cfg.model.l_sample);
  std::vector<PreparedBattery> prepared;
  for (const auto& b : sources) prepared.push_back(prepare_battery(b, cfg.model.l_sample, s.stats));

  std::vector<WindowedExample> validation;
  if (cfg.train.validate_last_source) {
    if (prepared.size() < 2)
      throw ConfigError("validate_last_source needs at least two source batteries");
    validation = make_windows(prepared.back(), cfg.model.n_in, cfg.model.n_out);
    prepared.pop_back();
  }
  const auto pool = pool_windows(prepared, cfg.model);
  s.windows = pool.size();
  spdlog::info("source training on {} windows from {} batteries", pool.size(), prepared.size());
  s.history = train_source(model, pool, cfg.train, validation.empty() ? nullptr : &validation);
  return s;
}

struct TargetStage {
  TargetSplit split;
  PreparedBattery prepared;
};

TargetStage prepare_target(const BatteryHistory& target, const ModelConfig& m,
                           const NormalizationStats& stats, double fraction) {
  TargetStage t;
  t.split = split_target(target.size(), fraction, m.n_in, m.n_out);
  t.prepared = prepare_battery(target, m.l_sample, stats);
  return t;
}

json checkpoint_extra(const ExperimentConfig& cfg, const NormalizationStats& stats,
                      const char* stage) {
  return json{{"stage", stage}, {"seed", cfg.seed}, {"normalizer", stats.to_json()}};
}

NormalizationStats stats_from_checkpoint(const json& extra) {
  if (!extra.contains("normalizer"))
    throw DataError("checkpoint carries no normalization statistics");
  return NormalizationStats::from_json(extra.at("normalizer"));
}

} // namespace

// ---- config ----------------------------------------------------------------

void ExperimentConfig::resolve() {
  model.validate();
  train.seed = seed;
  train.validate();
  if (!(data.finetune_fraction > 0 && data.finetune_fraction < 1))
    throw ConfigError("data.finetune_fraction must be in (0, 1)");
  if (data.target_id.empty()) throw ConfigError("data.target_id is empty");
}

json experiment_config_to_json(const ExperimentConfig& c) {
  return json{{"seed", c.seed},
              {"out", c.out_dir},
              {"data",
               {{"battery_files", c.data.battery_files},
                {"data_dir", c.data.data_dir},
                {"target_id", c.data.target_id},
                {"finetune_fraction", c.data.finetune_fraction}}},
              {"model", model_config_to_json(c.model)},
              {"train", train_config_to_json(c.train)},
              {"prune", {{"depths", c.prune.depths}, {"l_samples", c.prune.l_samples}}},
              {"synth", synth_to_json(c.synth)}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  reject_unknown(j, {"seed", "out", "data", "model", "train", "prune", "synth"}, "config");
  ExperimentConfig c;
  get_field(j, "seed", c.seed, "config");
  get_field(j, "out", c.out_dir, "config");
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d, {"battery_files", "data_dir", "target_id", "finetune_fraction"}, "data");
    get_field(d, "battery_files", c.data.battery_files, "data");
    get_field(d, "data_dir", c.data.data_dir, "data");
    get_field(d, "target_id", c.data.target_id, "data");
    get_field(d, "finetune_fraction", c.data.finetune_fraction, "data");
  }
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("prune")) {
    const auto& p = j.at("prune");
    reject_unknown(p, {"depths", "l_samples"}, "prune");
    get_field(p, "depths", c.prune.depths, "prune");
    get_field(p, "l_samples", c.prune.l_samples, "prune");
  }
  if (j.contains("synth")) c.synth = synth_from_json(j.at("synth"));
  c.resolve();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path);
  json j;
  try {
    f >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

// ---- data ------------------------------------------------------------------

Dataset load_dataset(const DataConfig& cfg) {
  std::vector<std::string> files = cfg.battery_files;
  if (!cfg.data_dir.empty()) {
    if (!fs::is_directory(cfg.data_dir))
      throw ConfigError("data_dir " + cfg.data_dir + " is not a directory");
    std::vector<std::string> found;
    for (const auto& entry : fs::directory_iterator(cfg.data_dir))
      if (entry.is_regular_file() && entry.path().extension() == ".csv")
        found.push_back(entry.path().string());
    std::sort(found.begin(), found.end());
    files.insert(files.end(), found.begin(), found.end());
  }
  if (files.empty()) throw ConfigError("no battery files configured");

  Dataset ds;
  bool have_target = false;
  std::set<std::string> ids;
  for (const auto& path : files) {
    auto h = load_canonical_csv(path);
    if (!ids.insert(h.battery_id).second)
      throw ConfigError("battery id " + h.battery_id + " appears twice (" + path + ")");
    if (h.battery_id == cfg.target_id) {
      ds.target = std::move(h);
      have_target = true;
    } else {
      ds.sources.push_back(std::move(h));
    }
  }
  if (!have_target) throw ConfigError("target battery " + cfg.target_id + " not among the data files");
  if (ds.sources.empty()) throw ConfigError("no source batteries besides the target");
  return ds;
}

// ---- pipeline --------------------------------------------------------------

PipelineResult run_pipeline(const Dataset& data, const ExperimentConfig& cfg) {
  PipelineResult r;
  CyFormer<float> model(cfg.model, cfg.seed);
  auto source = train_stage(model, data.sources, cfg);
  r.stats = source.stats;
  r.source_history = std::move(source.history);
  r.source_windows = source.windows;

  auto target = prepare_target(data.target, cfg.model, r.stats, cfg.data.finetune_fraction);
  r.split = target.split;
  const auto ft = finetune_windows(target.prepared, r.split, cfg.model.n_in, cfg.model.n_out);
  r.finetune_windows = ft.size();
  r.finetune_history = finetune_target(model, ft, cfg.train);
  r.metrics = evaluate_metrics(
      model, hidden_windows(target.prepared, r.split, cfg.model.n_in, cfg.model.n_out));
  return r;
}

std::vector<PruneRow> prune_sweep(const Dataset& data, const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, ModelConfig>> variants;
  for (auto depth : cfg.prune.depths)
    variants.emplace_back("depth=" + std::to_string(depth), prune(cfg.model, depth, std::nullopt));
  for (auto l : cfg.prune.l_samples)
    variants.emplace_back("l_sample=" + std::to_string(l), prune(cfg.model, std::nullopt, l));

  std::vector<PruneRow> rows;
  for (const auto& [name, model] : variants) {
    spdlog::info("prune-sweep variant {}", name);
    ExperimentConfig v = cfg;
    v.model = model;
    PruneRow row{name, model, count_flops(model), count_params(model), {}};
    row.metrics = run_pipeline(data, v).metrics;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string prune_table_csv(const std::vector<PruneRow>& rows) {
  std::string out = "variant,flops,params,mae,mape,rmse\n";
  for (const auto& r : rows)
    out += fmt::format("{},{},{},{:.17g},{:.17g},{:.17g}\n", r.variant, r.flops, r.params,
                       r.metrics.mae, r.metrics.mape, r.metrics.rmse);
  return out;
}

ModelConfig gradcheck_tiny_config() {
  ModelConfig m;
  m.c = 2;
  m.l_sample = 3;
  m.n_in = 4;
  m.n_out = 2;
  m.d_encoder = 4;
  m.d_decoder = 4;
  m.n_enc_layers = 1;
  m.n_dec_layers = 1;
  m.n_heads = 2;
  return m;
}

GradcheckReport gradcheck_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  CyFormer<double> model(config, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> soh(0.7, 1.0);
  const std::size_t batch = 2;
  std::vector<double> x(batch * config.n_in * config.l_sample * config.c);
  for (auto& v : x) v = normal(rng);
  std::vector<double> y(batch * config.n_out);
  for (auto& v : y) v = soh(rng);
  const auto input = Tensor<double>::from({batch, config.n_in, config.l_sample, config.c}, x);
  const auto target = Tensor<double>::from({batch, config.n_out}, y);
  // Key biases have an exactly zero gradient (softmax ignores a per-row
  // shift), so their numeric side is pure roundoff, about ulp(loss) / step,
  // judged against the 1e-8 floor. A 2e-3 step keeps that near 1e-13; the
  // five-point stencil keeps the truncation error of curved coordinates small
  // at that step.
  GradcheckOptions opts;
  opts.step = 2e-3;
  opts.seed = seed;
  opts.fourth_order = true;
  return finite_diff_gradcheck<double>(
      [&] { return mae_loss(model.forward(input), target); }, model.parameters(), opts);
}

// ---- command line ----------------------------------------------------------

namespace {

struct CliOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool no_timestamp = false;
  std::string checkpoint;
  std::string battery;
};

ExperimentConfig resolve_cli(const CliOptions& o) {
  ExperimentConfig cfg;
  if (!o.config_path.empty()) cfg = load_experiment_config(o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  cfg.resolve();
  return cfg;
}

fs::path prepare_out(const ExperimentConfig& cfg, const std::string& command, bool timestamp) {
  fs::path dir(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw ConfigError("cannot create output directory " + dir.string());
  json echo = experiment_config_to_json(cfg);
  echo["command"] = command;
  if (timestamp) {
    const auto now = std::chrono::system_clock::now();
    echo["timestamp"] = fmt::format("{:%Y-%m-%dT%H:%M:%S}", fmt::gmtime(std::chrono::system_clock::to_time_t(now)));
  }
  write_text(dir / ("config." + command + ".json"), echo.dump(2) + "\n");
  return dir;
}

std::string checkpoint_or(const CliOptions& o, const fs::path& dir, const char* fallback) {
  return o.checkpoint.empty() ? (dir / fallback).string() : o.checkpoint;
}

int cmd_train(const CliOptions& o, std::ostream& out) {
  auto cfg = resolve_cli(o);
  const auto data = load_dataset(cfg.data);
  const auto dir = prepare_out(cfg, "train", !o.no_timestamp);
  CyFormer<float> model(cfg.model, cfg.seed);
  auto stage = train_stage(model, data.sources, cfg);
  save_checkpoint((dir / "checkpoint_source.ckpt").string(), model,
                  checkpoint_extra(cfg, stage.stats, "source"));
  write_text(dir / "loss_history.csv", history_csv(stage.history));
  write_text(dir / "normalizer.json", stage.stats.to_json().dump(2) + "\n");
  out << fmt::format("source windows={} epochs={} final_loss={:.6g}\n", stage.windows,
                     stage.history.train_loss.size(),
                     stage.history.train_loss.empty() ? 0.0 : stage.history.train_loss.back());
  return kExitOk;
}

int cmd_finetune(const CliOptions& o, std::ostream& out) {
  auto cfg = resolve_cli(o);
  const auto data = load_dataset(cfg.data);
  const auto dir = prepare_out(cfg, "finetune", !o.no_timestamp);
  auto ckpt = load_checkpoint<float>(checkpoint_or(o, dir, "checkpoint_source.ckpt"));
  if (!(ckpt.model.config() == cfg.model))
    spdlog::warn("model section of the config differs from the checkpoint; using the checkpoint");
  const auto& m = ckpt.model.config();
  const auto stats = stats_from_checkpoint(ckpt.extra);
  auto target = prepare_target(data.target, m, stats, cfg.data.finetune_fraction);
  const auto windows = finetune_windows(target.prepared, target.split, m.n_in, m.n_out);
  const auto hist = finetune_target(ckpt.model, windows, cfg.train);
  save_checkpoint((dir / "checkpoint_finetuned.ckpt").string(), ckpt.model,
                  checkpoint_extra(cfg, stats, "finetuned"));
  write_text(dir / "finetune_history.csv", history_csv(hist));
  const json split{{"battery_id", data.target.battery_id},
                   {"total_cycles", target.split.total_cycles},
                   {"finetune_cycles", target.split.finetune_cycles},
                   {"hidden_cycles", target.split.hidden_cycles},
                   {"promoted", target.split.promoted}};
  write_text(dir / "split.json", split.dump(2) + "\n");
  out << fmt::format("finetune windows={} finetune_cycles={} hidden_cycles={}\n", windows.size(),
                     target.split.finetune_cycles, target.split.hidden_cycles);
  return kExitOk;
}

int cmd_evaluate(const CliOptions& o, std::ostream& out) {
  auto cfg = resolve_cli(o);
  const auto data = load_dataset(cfg.data);
  const auto dir = prepare_out(cfg, "evaluate", !o.no_timestamp);
  const auto ckpt = load_checkpoint<float>(checkpoint_or(o, dir, "checkpoint_finetuned.ckpt"));
  const auto& m = ckpt.model.config();
  auto target = prepare_target(data.target, m, stats_from_checkpoint(ckpt.extra),
                               cfg.data.finetune_fraction);
  const auto report = evaluate_metrics(
      ckpt.model, hidden_windows(target.prepared, target.split, m.n_in, m.n_out));
  write_text(dir / "metrics.txt", metrics_to_text(report));
  write_text(dir / "metrics.json", metrics_to_json(report).dump(2) + "\n");
  write_text(dir / "predictions.csv", predictions_to_csv(report.pairs));
  out << metrics_to_text(report);
  return kExitOk;
}

int cmd_predict(const CliOptions& o, std::ostream& out) {
  if (o.battery.empty()) throw ConfigError("predict needs --battery FILE");
  auto cfg = resolve_cli(o);
  const auto dir = prepare_out(cfg, "predict", !o.no_timestamp);
  const auto ckpt = load_checkpoint<float>(checkpoint_or(o, dir, "checkpoint_finetuned.ckpt"));
  const auto& m = ckpt.model.config();
  LoadOptions lo;
  lo.require_capacity = false;
  const auto history = load_canonical_csv(o.battery, lo);
  const auto prepared = prepare_battery(history, m.l_sample, stats_from_checkpoint(ckpt.extra));
  const auto series = predict_series(ckpt.model, prepared);
  const auto path = dir / ("predictions_" + history.battery_id + ".csv");
  write_text(path, predictions_to_csv(series));
  out << fmt::format("{} predictions written to {}\n", series.size(), path.string());
  return kExitOk;
}

int cmd_prune_sweep(const CliOptions& o, std::ostream& out) {
  auto cfg = resolve_cli(o);
  const auto data = load_dataset(cfg.data);
  const auto dir = prepare_out(cfg, "prune-sweep", !o.no_timestamp);
  const auto table = prune_table_csv(prune_sweep(data, cfg));
  write_text(dir / "prune_sweep.csv", table);
  out << table;
  return kExitOk;
}

int cmd_gradcheck(const CliOptions& o, std::ostream& out) {
  const auto seed = o.seed.value_or(0);
  const auto report = gradcheck_model(gradcheck_tiny_config(), seed);
  out << fmt::format("max_rel_err={:.3e} checked={} skipped_kinks={} worst={}[{}]\n",
                     report.max_rel_err, report.checked, report.skipped_kinks, report.worst_param,
                     report.worst_index);
  return report.max_rel_err < 1e-4 ? kExitOk : kExitCheckFailed;
}

int cmd_synth(const CliOptions& o, std::ostream& out) {
  auto cfg = resolve_cli(o);
  if (o.seed) cfg.synth.seed = *o.seed;
  const auto dir = prepare_out(cfg, "synth", !o.no_timestamp);
  const auto fleet = generate_synthetic_fleet(cfg.synth);
  for (const auto& b : fleet) write_canonical_csv((dir / (b.battery_id + ".csv")).string(), b);
  out << fmt::format("{} batteries written to {}\n", fleet.size(), dir.string());
  return kExitOk;
}

// Routes library logging to the caller's error stream for the duration of run().
class LogRedirect {
public:
  explicit LogRedirect(std::ostream& err) : previous_(spdlog::default_logger()) {
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err, true);
    auto logger = std::make_shared<spdlog::logger>("cyformer", sink);
    logger->set_pattern("[%l] %v");
    logger->set_level(previous_->level());
    spdlog::set_default_logger(logger);
  }
  ~LogRedirect() { spdlog::set_default_logger(previous_); }

private:
  std::shared_ptr<spdlog::logger> previous_;
};

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"CyFormer battery state-of-health experiments", "cyformer"};
  app.require_subcommand(1);
  CliOptions o;
  std::uint64_t seed = 0;

  using Handler = int (*)(const CliOptions&, std::ostream&);
  const std::vector<std::tuple<const char*, const char*, Handler>> commands = {
      {"train", "stage 1: train on the source batteries", cmd_train},
      {"finetune", "stage 2: fine-tune on the target's leading segment", cmd_finetune},
      {"evaluate", "metrics and predictions on the target's hidden segment", cmd_evaluate},
      {"predict", "SoH predictions for one battery file", cmd_predict},
      {"prune-sweep", "retrain over encoder depths and samples per cycle", cmd_prune_sweep},
      {"gradcheck", "float64 finite-difference check of the full model", cmd_gradcheck},
      {"synth", "write the synthetic battery fleet", cmd_synth}};
  std::map<CLI::App*, Handler> handlers;
  for (const auto& [name, help, handler] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "seed for initialization and shuffling (synth: fleet seed)");
    sub->add_option("--out", o.out_dir, "output directory");
    sub->add_flag("--no-timestamp", o.no_timestamp, "omit the timestamp from the config echo");
    if (std::string(name) == "finetune" || std::string(name) == "evaluate" ||
        std::string(name) == "predict")
      sub->add_option("--checkpoint", o.checkpoint, "checkpoint to start from");
    if (std::string(name) == "predict")
      sub->add_option("--battery", o.battery, "canonical CSV to predict")->required();
    handlers[sub] = handler;
  }

  std::vector<std::string> argv_store{"cyformer"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  CLI::App* chosen = app.get_subcommands().front();
  if (chosen->count("--seed")) o.seed = seed;

  LogRedirect redirect(err);
  try {
    return handlers.at(chosen)(o, out);
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}

} // namespace cyformer

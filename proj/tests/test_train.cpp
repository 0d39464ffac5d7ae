#include <cstring>

#include "doctest.h"

#include "cyformer/errors.hpp"
#include "cyformer/synth.hpp"
#include "cyformer/train.hpp"
#include "support.hpp"

using namespace cyformer;

namespace {

ModelConfig tiny_model(std::size_t n_out = 1) {
  ModelConfig c;
  c.l_sample = 4;
  c.n_in = 3;
  c.n_out = n_out;
  c.d_encoder = c.d_decoder = 4;
  c.n_heads = 2;
  c.n_enc_layers = c.n_dec_layers = 1;
  c.mlp_hidden = 8;
  return c;
}

struct Fleet {
  std::vector<BatteryHistory> histories;
  NormalizationStats stats;
  std::vector<PreparedBattery> prepared;
};

Fleet small_fleet(std::size_t l_sample) {
  SynthOptions so;
  so.n_source = 2;
  so.min_cycles = 30;
  so.max_cycles = 40;
  Fleet f;
  f.histories = generate_synthetic_fleet(so);
  f.stats = fit_normalizer(std::vector<BatteryHistory>(f.histories.begin(), f.histories.end() - 1),
                           l_sample);
  for (const auto& h : f.histories) f.prepared.push_back(prepare_battery(h, l_sample, f.stats));
  return f;
}

std::vector<WindowedExample> source_windows(const Fleet& f, const ModelConfig& m) {
  std::vector<WindowedExample> out;
  for (std::size_t i = 0; i + 1 < f.prepared.size(); ++i) {
    auto w = make_windows(f.prepared[i], m.n_in, m.n_out);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

template <typename T>
std::vector<std::vector<T>> snapshot(const CyFormer<T>& model) {
  std::vector<std::vector<T>> s;
  for (const auto& p : model.parameters()) s.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return s;
}

TrainConfig quick_train(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.finetune_epochs = epochs;
  t.lr_train = 3e-3;
  t.lr_finetune = 1e-3;
  t.batch_size = 8;
  return t;
}

} // namespace

TEST_SUITE("train") {

TEST_CASE("MAE loss value and subgradient") {
  auto pred = Tensor<double>::from({2, 1}, {0.90, 0.88}, true);
  const auto target = Tensor<double>::from({2, 1}, {0.92, 0.86});
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto loss = mae_loss(pred, target);
  CHECK(loss.item() == doctest::Approx(0.02).epsilon(1e-12));
  tape.backward(loss);
  CHECK(pred.grad()[0] == -0.5);
  CHECK(pred.grad()[1] == 0.5);

  auto tie = Tensor<double>::from({3}, {1.0, 2.0, 3.0}, true);
  Tape<double> t2;
  TapeScope<double> s2(t2);
  auto l2 = mae_loss(tie, Tensor<double>::from({3}, {1.0, 0.0, 4.0}));
  t2.backward(l2);
  CHECK(tie.grad()[0] == 0.0);
  CHECK(tie.grad()[1] == doctest::Approx(1.0 / 3));
  CHECK(tie.grad()[2] == doctest::Approx(-1.0 / 3));
  CHECK_THROWS_AS(mae_loss(tie, Tensor<double>::zeros({2})), DimensionError);
}

TEST_CASE("Adam matches a scalar reference") {
  std::mt19937_64 rng(50);
  auto w = testing::random_tensor(rng, {3, 2}, true);
  auto ref = std::vector<double>(w.data().begin(), w.data().end());
  Adam<double> opt({{"w", w}}, 0.9, 0.999, 1e-8);
  CHECK(opt.steps() == 0);
  std::vector<double> m(6, 0.0), v(6, 0.0);
  for (int t = 1; t <= 5; ++t) {
    const auto g = testing::random_values(rng, 6);
    w.zero_grad();
    for (std::size_t i = 0; i < 6; ++i) w.grad()[i] = g[i];
    opt.step(1e-2);
    for (std::size_t i = 0; i < 6; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 1e-2 * mh / (std::sqrt(vh) + 1e-8);
    }
    CHECK(testing::max_abs_diff(w.data(), ref) < 1e-14);
  }
  CHECK(opt.steps() == 5);
}

TEST_CASE("Adam first step moves by about lr; zero gradient moves nothing") {
  auto w = Tensor<double>::from({3}, {1.0, 1.0, 1.0}, true);
  Adam<double> opt({{"w", w}}, 0.9, 0.999, 1e-8);
  w.zero_grad();
  w.grad()[0] = 0.5;
  w.grad()[1] = -3.0;
  opt.step(1e-3);
  CHECK(w.data()[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-7));
  CHECK(w.data()[1] == doctest::Approx(1.0 + 1e-3).epsilon(1e-7));
  CHECK(w.data()[2] == 1.0);

  auto lost = Tensor<double>::from({1}, {0.0}, true);
  Adam<double> strict({{"lost", lost}}, 0.9, 0.999, 1e-8);
  CHECK_THROWS_AS(strict.step(1e-3), ContractError);
  strict.freeze([](const std::string& n) { return n == "lost"; });
  CHECK_NOTHROW(strict.step(1e-3));
}

TEST_CASE("learning-rate schedule") {
  CHECK(lr_schedule(0, 1500, 2.0 / 3.0, 0.1, 1e-4) == 1e-4);
  CHECK(lr_schedule(999, 1500, 2.0 / 3.0, 0.1, 1e-4) == 1e-4);
  CHECK(lr_schedule(1000, 1500, 2.0 / 3.0, 0.1, 1e-4) == doctest::Approx(1e-5));
  CHECK(lr_schedule(1499, 1500, 2.0 / 3.0, 0.1, 1e-4) == doctest::Approx(1e-5));
  CHECK(lr_schedule(6, 10, 2.0 / 3.0, 0.1, 1.0) == 1.0);
  CHECK(lr_schedule(7, 10, 2.0 / 3.0, 0.1, 1.0) == doctest::Approx(0.1));
}

TEST_CASE("metrics") {
  const auto r = compute_metrics({0.8, 0.8}, {0.79, 0.81});
  CHECK(r.mae == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(r.mape == doctest::Approx(0.0125).epsilon(1e-12));
  CHECK(r.rmse == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(r.n == 2);

  std::mt19937_64 rng(51);
  std::uniform_real_distribution<double> u(0.5, 1.1);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng() % 20;
    std::vector<double> y(n), p(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = u(rng);
      p[i] = u(rng);
    }
    double a = 0, ap = 0, sq = 0;
    for (std::size_t i = 0; i < n; ++i) {
      a += std::abs(y[i] - p[i]);
      ap += std::abs((y[i] - p[i]) / y[i]);
      sq += (y[i] - p[i]) * (y[i] - p[i]);
    }
    const auto m = compute_metrics(y, p);
    CHECK(std::abs(m.mae - a / n) < 1e-12);
    CHECK(std::abs(m.mape - ap / n) < 1e-12);
    CHECK(std::abs(m.rmse - std::sqrt(sq / n)) < 1e-12);
    CHECK(m.rmse >= m.mae - 1e-15);
  }
  CHECK_THROWS_AS(compute_metrics({}, {}), ContractError);
  CHECK_THROWS_AS(compute_metrics({0.8}, {0.8, 0.7}), ContractError);
  CHECK_THROWS_AS(compute_metrics({0.0}, {0.1}), DataError);

  const auto text = metrics_to_text(r);
  CHECK(text.find("mae=") != std::string::npos);
  CHECK(text.find("1.2500%") != std::string::npos);
  CHECK(metrics_to_json(r).at("n") == 2);
  CHECK(predictions_to_csv({{5, 0.9, 0.91}}).rfind("cycle,soh_true,soh_pred\n5,", 0) == 0);
}

TEST_CASE("train config JSON") {
  auto t = quick_train(3);
  t.freeze_encoder = true;
  CHECK(train_config_from_json(train_config_to_json(t)) == t);
  CHECK_THROWS_AS(train_config_from_json({{"learning_rate", 1.0}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"batch_size", 0}}), ConfigError);
}

TEST_CASE("stacking") {
  const auto cfg = tiny_model(2);
  const auto f = small_fleet(cfg.l_sample);
  const auto w = make_windows(f.prepared[0], cfg.n_in, cfg.n_out);
  std::vector<const WindowedExample*> batch{&w[0], &w[3]};
  const auto x = stack_inputs<float>(batch, cfg);
  const auto y = stack_targets<float>(batch, cfg);
  CHECK(x.shape() == Shape{2, 3, 4, kNumChannels});
  CHECK(y.shape() == Shape{2, 2});
  CHECK(x.data()[x.size() / 2] == w[3].input[0]);
  CHECK(y.data()[3] == static_cast<float>(w[3].target[1]));
  auto wrong = tiny_model(2);
  wrong.n_in = 4;
  CHECK_THROWS_AS(stack_inputs<float>(batch, wrong), DimensionError);
}

TEST_CASE("source training: history, determinism and errors") {
  const auto cfg = tiny_model();
  const auto f = small_fleet(cfg.l_sample);
  const auto windows = source_windows(f, cfg);
  auto tc = quick_train(6);
  CyFormer<float> a(cfg, 3), b(cfg, 3);
  const auto ha = train_source(a, windows, tc);
  const auto hb = train_source(b, windows, tc);
  CHECK(ha.train_loss.size() == 6);
  CHECK(ha.learning_rate.size() == 6);
  CHECK(ha.learning_rate[3] == tc.lr_train);
  CHECK(ha.learning_rate[4] == doctest::Approx(tc.lr_train * tc.gamma));
  CHECK(ha.optimizer_steps == 6 * ((windows.size() + 7) / 8));
  CHECK(ha.train_loss == hb.train_loss);
  CHECK(snapshot(a) == snapshot(b));
  CHECK(ha.train_loss.back() < ha.train_loss.front());

  CyFormer<float> c(cfg, 3);
  const auto val = make_windows(f.prepared[1], cfg.n_in, cfg.n_out);
  const auto hv = train_source(c, windows, tc, &val);
  CHECK(hv.val_mae.size() == 6);

  CHECK_THROWS_AS(train_source(c, {}, tc), ConfigError);
  auto broken = windows;
  broken[0].target[0] = std::nan("");
  CHECK_THROWS_AS(train_source(c, broken, tc), DataError);
}

TEST_CASE("fine-tuning") {
  const auto cfg = tiny_model();
  const auto f = small_fleet(cfg.l_sample);
  auto tc = quick_train(5);
  CyFormer<float> model(cfg, 4);
  train_source(model, source_windows(f, cfg), tc);
  const auto& target = f.prepared.back();
  const auto split = split_target(target.size(), 0.3, cfg.n_in, cfg.n_out);
  const auto ft = finetune_windows(target, split, cfg.n_in, cfg.n_out);
  REQUIRE_FALSE(ft.empty());

  auto none = tc;
  none.finetune_epochs = 0;
  auto frozen_copy = model.clone();
  const auto h0 = finetune_target(frozen_copy, ft, none);
  CHECK(h0.train_loss.empty());
  CHECK(snapshot(frozen_copy) == snapshot(model));

  const double before = evaluate_metrics(model, ft).mae;
  tc.finetune_epochs = 20;
  auto tuned = model.clone();
  const auto h = finetune_target(tuned, ft, tc);
  CHECK(h.train_loss.size() == 20);
  CHECK(h.learning_rate.front() == tc.lr_finetune);
  CHECK(evaluate_metrics(tuned, ft).mae <= before * 1.1);

  tc.freeze_encoder = true;
  auto partial = model.clone();
  finetune_target(partial, ft, tc);
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const auto& name = model.parameters()[i].name;
    const auto& p0 = model.parameters()[i].tensor;
    const auto& p1 = partial.parameters()[i].tensor;
    const bool same = std::equal(p0.data().begin(), p0.data().end(), p1.data().begin());
    const bool encoder_side = name.rfind("embed.", 0) == 0 || name.rfind("encoder.", 0) == 0 ||
                              name.rfind("enc_head.", 0) == 0;
    // one query attends only to itself: its q/k projections get no gradient
    const bool dead = name.find("self_attn.w_q") != std::string::npos ||
                      name.find("self_attn.b_q") != std::string::npos ||
                      name.find("self_attn.w_k") != std::string::npos ||
                      name.find("self_attn.b_k") != std::string::npos;
    if (!dead) CHECK_MESSAGE(same == encoder_side, name);
  }
}

TEST_CASE("prediction series and evaluation pairs") {
  const auto cfg = tiny_model(2);
  const auto f = small_fleet(cfg.l_sample);
  CyFormer<float> model(cfg, 5);
  const auto& battery = f.prepared.back();
  const auto series = predict_series(model, battery);
  CHECK(series.size() == battery.size() - cfg.n_in);
  CHECK(series.front().cycle == static_cast<int>(cfg.n_in) + 1);
  CHECK(series.back().cycle == static_cast<int>(battery.size()));

  const auto windows = make_windows(battery, cfg.n_in, cfg.n_out);
  const auto preds = predict_windows(model, windows);
  REQUIRE(preds.size() == windows.size() * 2);
  // offset-0 predictions of every window, then the last window's offset 1
  for (std::size_t i = 0; i < windows.size(); ++i) {
    CHECK(series[i].cycle == windows[i].target_cycles[0]);
    CHECK(series[i].soh_pred == preds[2 * i]);
    CHECK(series[i].soh_true == windows[i].target[0]);
  }
  CHECK(series.back().soh_pred == preds.back());

  const auto report = evaluate_metrics(model, windows);
  CHECK(report.pairs.size() == windows.size() * 2);
  CHECK(report.pairs[1].cycle == windows[0].target_cycles[1]);
  CHECK(report.pairs[1].soh_pred == preds[1]);

  // batch size does not change the numbers
  CHECK(predict_windows(model, windows, 1) == preds);
  CHECK_THROWS_AS(evaluate_metrics(model, {}), ConfigError);
}

}

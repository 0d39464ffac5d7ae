#include <set>

#include "doctest.h"

#include "cyformer/errors.hpp"
#include "cyformer/experiment.hpp"
#include "cyformer/gradcheck.hpp"
#include "cyformer/kernels.hpp"
#include "cyformer/model.hpp"
#include "oracles.hpp"

using namespace cyformer;
using namespace testing;

namespace {

ModelConfig random_config(std::mt19937_64& rng) {
  ModelConfig c;
  const std::size_t heads[] = {1, 2, 4};
  c.n_heads = heads[rng() % 3];
  c.d_encoder = c.n_heads * 2 * (1 + rng() % 2);
  c.d_decoder = c.n_heads * 2 * (1 + rng() % 2);
  c.c = 1 + rng() % 5;
  c.l_sample = 1 + rng() % 5;
  c.n_in = 1 + rng() % 5;
  c.n_out = 1 + rng() % 3;
  c.n_enc_layers = 1 + rng() % 3;
  c.n_dec_layers = 1 + rng() % 3;
  c.mlp_hidden = rng() % 2 ? 0 : 3 + rng() % 6;
  c.enable_row_attn = rng() % 3 != 0;
  c.enable_col_attn = rng() % 3 != 0;
  c.activation = rng() % 2 ? Activation::relu : Activation::gelu;
  return c;
}

} // namespace

TEST_SUITE("model") {

TEST_CASE("pe_1d values") {
  const auto p0 = pe_1d<double>(0, 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(p0.data()[i] == (i % 2 ? 1.0 : 0.0));
  const auto p1 = pe_1d<double>(1, 16);
  CHECK(p1.data()[0] == doctest::Approx(0.841471).epsilon(1e-6));
  CHECK(p1.data()[1] == doctest::Approx(0.540302).epsilon(1e-6));
  const auto big = pe_1d<double>(10000, 16);
  // 10000 / 10000^(8/16) = 100
  CHECK(big.data()[8] == doctest::Approx(std::sin(100.0)).epsilon(1e-12));
  CHECK(big.data()[9] == doctest::Approx(std::cos(100.0)).epsilon(1e-12));
  CHECK_THROWS_AS(pe_1d<double>(3, 7), ConfigError);
}

TEST_CASE("pe_2d is the sum of two 1D codes and symmetric") {
  const auto z = pe_2d<double>(0, 0, 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(z.data()[i] == (i % 2 ? 2.0 : 0.0));
  std::mt19937_64 rng(30);
  for (int t = 0; t < 20; ++t) {
    const std::size_t a = rng() % 50, b = rng() % 50;
    const auto ab = pe_2d<double>(a, b, 16), ba = pe_2d<double>(b, a, 16);
    const auto pa = pe_1d<double>(a, 16), pb = pe_1d<double>(b, 16);
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK(ab.data()[i] == ba.data()[i]);
      CHECK(ab.data()[i] == pa.data()[i] + pb.data()[i]);
    }
  }
}

TEST_CASE("multi-head attention matches the loop oracle") {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 20; ++t) {
    const std::size_t L = 3, M = 1 + rng() % 5, d = 8;
    const auto p = random_attention(rng, d, 2);
    const auto seq = random_tensor(rng, {L, d});
    const auto kv = random_tensor(rng, {M, d});
    CHECK(max_diff(attention_oracle(rows_of(seq, L, d), rows_of(seq, L, d), p),
                   multi_head_attention(seq, p)) < 1e-12);
    CHECK(max_diff(attention_oracle(rows_of(seq, L, d), rows_of(kv, M, d), p),
                   multi_head_attention(seq, p, &kv)) < 1e-12);
  }
}

TEST_CASE("multi-head attention: single token and identical tokens") {
  std::mt19937_64 rng(32);
  const auto p = random_attention(rng, 4, 2);
  const auto one = random_tensor(rng, {1, 4});
  AttentionTrace<double> trace;
  const auto y = multi_head_attention<double>(one, p, nullptr, &trace);
  for (auto w : trace.weights.data()) CHECK(w == 1.0);
  CHECK(max_diff(affine(affine(rows_of(one, 1, 4), p.v), p.o), y) < 1e-12);

  auto same = TD::zeros({5, 4});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) same.data()[i * 4 + j] = one.data()[j];
  multi_head_attention<double>(same, p, nullptr, &trace);
  CHECK(trace.weights.shape() == Shape{1, 2, 5, 5});
  for (auto w : trace.weights.data()) CHECK(w == doctest::Approx(0.2).epsilon(1e-12));
  CHECK_THROWS_AS(multi_head_attention(TD::zeros({3, 6}), random_attention(rng, 6, 4)),
                  DimensionError);
}

TEST_CASE("row-wise attention: reductions and equivariance") {
  std::mt19937_64 rng(33);
  const std::size_t d = 4;
  const auto attn = random_attention(rng, d, 2);
  const auto norm = random_norm(rng, d);

  // n_in = 1: one plain self-attention + residual + norm
  const auto x1 = random_tensor(rng, {1, 5, d});
  const auto plain = layer_norm(add(reshape(x1, {5, d}), multi_head_attention(reshape(x1, {5, d}), attn)),
                                norm.gain, norm.bias, kLayerNormEps);
  const auto row1 = row_wise_attention(x1, attn, norm);
  CHECK(testing::max_abs_diff(row1.data(), plain.data()) < 1e-12);

  // l_sample = 1: weight 1 per row
  const auto xl = random_tensor(rng, {3, 1, d});
  const auto yl = row_wise_attention(xl, attn, norm);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto tok = reshape(TD::from({1, d}, {xl.data().begin() + i * d, xl.data().begin() + (i + 1) * d}), {1, d});
    const Matrix proj = affine(affine(rows_of(tok, 1, d), attn.v), attn.o);
    auto res = TD::zeros({1, d});
    for (std::size_t j = 0; j < d; ++j) res.data()[j] = tok.data()[j] + proj[0][j];
    const auto expect = layer_norm(res, norm.gain, norm.bias, kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j)
      CHECK(yl.data()[i * d + j] == doctest::Approx(expect.data()[j]).epsilon(1e-12));
  }

  const auto x = random_tensor(rng, {5, 3, d});
  std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  const auto a = row_wise_attention(permute_axis(x, 0, perm), attn, norm);
  const auto b = permute_axis(row_wise_attention(x, attn, norm), 0, perm);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("column-wise attention: reductions, equivariance and transpose duality") {
  std::mt19937_64 rng(34);
  const std::size_t d = 4;
  const auto attn = random_attention(rng, d, 2);
  const auto norm = random_norm(rng, d);

  const auto x1 = random_tensor(rng, {5, 1, d});
  const auto plain = layer_norm(add(reshape(x1, {5, d}), multi_head_attention(reshape(x1, {5, d}), attn)),
                                norm.gain, norm.bias, kLayerNormEps);
  CHECK(testing::max_abs_diff(column_wise_attention(x1, attn, norm).data(), plain.data()) < 1e-12);

  const auto x = random_tensor(rng, {3, 5, d});
  std::vector<std::size_t> perm{1, 4, 0, 2, 3};
  const auto a = column_wise_attention(permute_axis(x, 1, perm), attn, norm);
  const auto b = permute_axis(column_wise_attention(x, attn, norm), 1, perm);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

  const auto dual = transpose_01(row_wise_attention(transpose_01(x), attn, norm));
  CHECK(testing::max_abs_diff(column_wise_attention(x, attn, norm).data(), dual.data()) < 1e-12);
}

TEST_CASE("encoder layer: ablation, shape and gradient") {
  std::mt19937_64 rng(35);
  const std::size_t d = 4;
  EncoderLayerParams<double> layer;
  layer.mlp = random_mlp(rng, d, 6, true);
  layer.mlp_norm = random_norm(rng, d, true);
  const auto x = random_tensor(rng, {2, 3, 5, d});
  const auto mlp_only = encoder_layer_forward(x, layer, Activation::relu);
  const auto expect = layer_norm(add(x, mlp_forward(x, layer.mlp, Activation::relu)),
                                 layer.mlp_norm.gain, layer.mlp_norm.bias, kLayerNormEps);
  CHECK(testing::max_abs_diff(mlp_only.data(), expect.data()) == 0.0);
  CHECK_THROWS_AS(row_wise_attention(x, layer), ContractError);

  layer.row_attn = random_attention(rng, d, 2, true);
  layer.row_norm = random_norm(rng, d, true);
  layer.col_attn = random_attention(rng, d, 2, true);
  layer.col_norm = random_norm(rng, d, true);
  const auto full = encoder_layer_forward(x, layer, Activation::gelu);
  CHECK(full.shape() == x.shape());
  CHECK(row_wise_attention(x, layer).shape() == x.shape());
  CHECK(column_wise_attention(x, layer).shape() == x.shape());

  const auto r = random_tensor(rng, x.shape());
  std::vector<Parameter<double>> params;
  auto add_lin = [&](const std::string& n, const LinearParams<double>& p) {
    params.push_back({n + ".w", p.w});
    params.push_back({n + ".b", p.b});
  };
  for (auto* a : {&*layer.row_attn, &*layer.col_attn}) {
    add_lin("q", a->q);
    add_lin("k", a->k);
    add_lin("v", a->v);
    add_lin("o", a->o);
  }
  add_lin("fc1", layer.mlp.fc1);
  add_lin("fc2", layer.mlp.fc2);
  add_lin("fc3", layer.mlp.fc3);
  for (auto* n : {&*layer.row_norm, &*layer.col_norm, &layer.mlp_norm}) {
    params.push_back({"gain", n->gain});
    params.push_back({"bias", n->bias});
  }
  GradcheckOptions opts;
  opts.step = 2e-3;
  opts.fourth_order = true;
  const auto report = finite_diff_gradcheck<double>(
      [&] { return mean(mul(encoder_layer_forward(x, layer, Activation::gelu), r)); }, params, opts);
  CHECK_MESSAGE(report.max_rel_err < 1e-4, report.worst_param, "[", report.worst_index, "] analytic=",
                report.worst_analytic, " numeric=", report.worst_numeric);
}

TEST_CASE("encoder output head matches the per-sample sum") {
  std::mt19937_64 rng(36);
  for (int t = 0; t < 10; ++t) {
    const std::size_t n_in = 1 + rng() % 4, l = 1 + rng() % 5, de = 4, dd = 6;
    const auto head = random_linear(rng, l * de, dd);
    const auto x = random_tensor(rng, {n_in, l, de});
    const auto f = encoder_output_head(x, head);
    CHECK(f.shape() == Shape{n_in, dd});
    CHECK(max_diff(head_oracle(x, head), f) < 1e-12);
    const auto z = encoder_output_head(TD::zeros({n_in, l, de}), head);
    for (std::size_t i = 0; i < n_in * dd; ++i) CHECK(z.data()[i] == head.b.data()[i % dd]);
  }
  const auto head = random_linear(rng, 4, 3);
  const auto x = random_tensor(rng, {2, 1, 4});
  const auto plain = linear(reshape(x, {2, 4}), head.w, head.b);
  CHECK(testing::max_abs_diff(encoder_output_head(x, head).data(), plain.data()) == 0.0);
}

TEST_CASE("decoder layer: attention rows and gradient") {
  std::mt19937_64 rng(37);
  const std::size_t d = 4;
  DecoderLayerParams<double> layer{random_attention(rng, d, 2, true), random_norm(rng, d, true),
                                   random_attention(rng, d, 2, true), random_norm(rng, d, true),
                                   random_mlp(rng, d, 5, true),       random_norm(rng, d, true)};
  const auto q = random_tensor(rng, {3, d});
  const auto feats = random_tensor(rng, {6, d});
  AttentionTrace<double> trace;
  const auto y = decoder_layer_forward(q, feats, layer, Activation::relu, &trace);
  CHECK(y.shape() == Shape{3, d});
  CHECK(trace.weights.shape() == Shape{1, 2, 3, 6});
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t m = 0; m < 6; ++m) s += trace.weights.data()[r * 6 + m];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }

  AttentionTrace<double> self;
  const auto one = random_tensor(rng, {1, d});
  multi_head_attention<double>(one, layer.self_attn, nullptr, &self);
  for (auto w : self.weights.data()) CHECK(w == 1.0);

  const auto r = random_tensor(rng, {3, d});
  std::vector<Parameter<double>> params;
  for (auto* a : {&layer.self_attn, &layer.cross_attn})
    for (auto* l : {&a->q, &a->k, &a->v, &a->o}) {
      params.push_back({"w", l->w});
      params.push_back({"b", l->b});
    }
  for (auto* l : {&layer.mlp.fc1, &layer.mlp.fc2, &layer.mlp.fc3}) {
    params.push_back({"w", l->w});
    params.push_back({"b", l->b});
  }
  GradcheckOptions opts;
  opts.step = 2e-3;
  opts.fourth_order = true;
  const auto report = finite_diff_gradcheck<double>(
      [&] { return mean(mul(decoder_layer_forward(q, feats, layer, Activation::relu), r)); },
      params, opts);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("model forward: shapes and batch independence") {
  std::mt19937_64 rng(38);
  for (int t = 0; t < 10; ++t) {
    const auto cfg = random_config(rng);
    CyFormer<float> model(cfg, t);
    const std::size_t b = 1 + rng() % 3;
    auto x = random_tensor<float>(rng, {b, cfg.n_in, cfg.l_sample, cfg.c});
    const auto y = model.forward(x);
    CHECK(y.shape() == Shape{b, cfg.n_out});
    for (auto v : y.data()) CHECK(std::isfinite(v));
  }
  ModelConfig cfg;
  cfg.l_sample = 6;
  cfg.n_in = 5;
  cfg.d_encoder = cfg.d_decoder = 8;
  cfg.n_heads = 2;
  cfg.n_out = 3;
  CyFormer<float> model(cfg, 9);
  const auto x = random_tensor<float>(rng, {2, cfg.n_in, cfg.l_sample, cfg.c});
  const std::size_t per = cfg.n_in * cfg.l_sample * cfg.c;
  const auto both = model.forward(x);
  for (std::size_t i = 0; i < 2; ++i) {
    auto xi = Tensor<float>::from({1, cfg.n_in, cfg.l_sample, cfg.c},
                                  {x.data().begin() + i * per, x.data().begin() + (i + 1) * per});
    const auto yi = model.forward(xi);
    for (std::size_t j = 0; j < cfg.n_out; ++j)
      CHECK(std::abs(yi.data()[j] - both.data()[i * cfg.n_out + j]) < 1e-6);
  }
  CHECK_THROWS_AS(model.forward(Tensor<float>::zeros({1, cfg.n_in, cfg.l_sample + 1, cfg.c})),
                  DimensionError);
}

TEST_CASE("full model gradient check on the tiny config") {
  const auto report = gradcheck_model(gradcheck_tiny_config(), 0);
  CHECK(report.max_rel_err < 1e-4);
  CHECK(report.checked > 1000);
}

TEST_CASE("without attention and positional codes the model ignores cycle order") {
  std::mt19937_64 rng(39);
  ModelConfig cfg;
  cfg.c = 3;
  cfg.l_sample = 4;
  cfg.n_in = 5;
  cfg.n_out = 2;
  cfg.d_encoder = cfg.d_decoder = 4;
  cfg.n_enc_layers = cfg.n_dec_layers = 2;
  cfg.n_heads = 2;
  cfg.enable_row_attn = cfg.enable_col_attn = false;
  CyFormer<double> m(cfg, 3);
  auto no_pe_forward = [&](const TD& input) {
    auto x = linear(input, m.embed().w, m.embed().b);
    for (const auto& layer : m.encoder_layers()) x = encoder_layer_forward(x, layer, cfg.activation);
    const auto feats = encoder_output_head(x, m.enc_head());
    auto q = m.queries();
    for (const auto& layer : m.decoder_layers())
      q = decoder_layer_forward(q, feats, layer, cfg.activation);
    return linear(q, m.out_head().w, m.out_head().b);
  };
  const auto x = random_tensor(rng, {cfg.n_in, cfg.l_sample, cfg.c});
  const auto y = no_pe_forward(x);
  const auto yp = no_pe_forward(permute_axis(x, 0, {4, 2, 0, 3, 1}));
  CHECK(testing::max_abs_diff(y.data(), yp.data()) < 1e-12);
}

TEST_CASE("parameter count: formula, enumeration and names") {
  std::mt19937_64 rng(40);
  for (int t = 0; t < 20; ++t) {
    const auto cfg = random_config(rng);
    CyFormer<float> model(cfg, 1);
    CHECK(count_params(cfg) == model.num_scalars());
    std::set<std::string> names;
    for (const auto& p : model.parameters()) names.insert(p.name);
    CHECK(names.size() == model.parameters().size());
  }
  ModelConfig cfg;
  auto no_row = cfg;
  no_row.enable_row_attn = false;
  CHECK(count_params(cfg) - count_params(no_row) ==
        cfg.n_enc_layers * attention_block_params(cfg.d_encoder));
  CHECK(count_params(prune(cfg, 3, std::nullopt)) < count_params(cfg));
  CyFormer<float> model(cfg, 0);
  CHECK(model.parameters().front().name == "embed.w");
  CHECK(model.parameters()[2].name == "encoder.0.row_attn.w_q");
}

TEST_CASE("FLOP count equals twice the executed multiply-adds") {
  std::mt19937_64 rng(41);
  for (int t = 0; t < 20; ++t) {
    const auto cfg = random_config(rng);
    CyFormer<float> model(cfg, 1);
    const auto x = random_tensor<float>(rng, {1, cfg.n_in, cfg.l_sample, cfg.c});
    kernels::reset_gemm_mac_count();
    (void)model.forward(x);
    CHECK(count_flops(cfg) == 2 * kernels::gemm_mac_count());
  }
  ModelConfig cfg;
  for (std::size_t l = 2; l < 40; ++l) {
    auto a = cfg, b = cfg;
    a.l_sample = l;
    b.l_sample = l + 1;
    CHECK(count_flops(a) < count_flops(b));
  }
  for (std::size_t n = 2; n < 40; ++n) {
    auto a = cfg, b = cfg;
    a.n_in = n;
    b.n_in = n + 1;
    CHECK(count_flops(a) < count_flops(b));
  }
  const double ratio = static_cast<double>(count_flops(prune(cfg, std::nullopt, 24))) /
                       static_cast<double>(count_flops(cfg));
  MESSAGE("FLOPs(l_sample 24) / FLOPs(l_sample 32) = " << ratio);
  CHECK(ratio < 1.0);
}

TEST_CASE("prune") {
  ModelConfig cfg;
  CHECK(prune(cfg, 3, std::nullopt).n_enc_layers == 3);
  CHECK(prune(cfg, std::nullopt, 24).l_sample == 24);
  CHECK(prune(cfg, std::nullopt, std::nullopt) == cfg);
  CHECK(prune(cfg, 4, 32) == cfg);
  CHECK_THROWS_AS(prune(cfg, 5, std::nullopt), ContractError);
  CHECK_THROWS_AS(prune(cfg, 0, std::nullopt), ContractError);
  CHECK_THROWS_AS(prune(cfg, std::nullopt, 33), ContractError);
}

TEST_CASE("config validation") {
  ModelConfig cfg;
  cfg.n_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.d_encoder = 7;
  cfg.n_heads = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.n_in = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.enable_row_attn = cfg.enable_col_attn = false;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("queries are fixed at construction and clones are independent") {
  ModelConfig cfg;
  cfg.l_sample = 4;
  cfg.n_in = 3;
  cfg.n_enc_layers = cfg.n_dec_layers = 1;
  CyFormer<float> a(cfg, 5), b(cfg, 5);
  CHECK(std::equal(a.queries().data().begin(), a.queries().data().end(), b.queries().data().begin()));
  double sq = 0;
  for (auto v : a.queries().data()) sq += v * v;
  CHECK(std::sqrt(sq / a.queries().size()) < 0.05);
  auto c = a.clone();
  auto first = c.parameters()[0].tensor;
  first.data()[0] += 1.0f;
  CHECK(a.parameters()[0].tensor.data()[0] != c.parameters()[0].tensor.data()[0]);
}

}

#include "doctest.h"

#include "cyformer/errors.hpp"
#include "cyformer/gradcheck.hpp"
#include "support.hpp"

using namespace cyformer;
using testing::random_tensor;

namespace {

using TD = Tensor<double>;

// sum(y * r) with fixed random r, so no output direction has a zero gradient
// by symmetry (e.g. sum(softmax(x)) is constant).
TD weighted_sum(const TD& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor(rng, y.shape())));
}

double check(const std::function<TD()>& f, std::vector<TD> inputs) {
  std::vector<Parameter<double>> params;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    params.push_back({"p" + std::to_string(i), inputs[i]});
  return finite_diff_gradcheck<double>(f, params).max_rel_err;
}

std::vector<double> grad_of(const TD& t) { return {t.grad().begin(), t.grad().end()}; }

} // namespace

TEST_SUITE("tensor") {

TEST_CASE("matmul: identity and selector") {
  const auto m = TD::from({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(TD::from({2, 2}, {1, 0, 0, 1}), m).data()[3] == 4);
  const auto eye = matmul(TD::from({2, 2}, {1, 0, 0, 1}), m);
  CHECK(std::vector<double>(eye.data().begin(), eye.data().end()) == std::vector<double>{1, 2, 3, 4});
  const auto sel = matmul(TD::from({2, 2}, {1, 0, 0, 0}), TD::from({2, 2}, {5, 6, 7, 8}));
  CHECK(std::vector<double>(sel.data().begin(), sel.data().end()) == std::vector<double>{5, 6, 0, 0});
}

TEST_CASE("matmul: gradient of sum is ones times b transposed") {
  std::mt19937_64 rng(10);
  auto a = random_tensor(rng, {3, 4}, true);
  auto b = random_tensor(rng, {4, 2}, true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = sum(matmul(a, b));
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 4; ++p)
      CHECK(a.grad()[i * 4 + p] == doctest::Approx(b.data()[p * 2] + b.data()[p * 2 + 1]));
  GradcheckOptions opts;
  opts.step = 1e-5;
  const auto report = finite_diff_gradcheck<double>([&] { return sum(matmul(a, b)); },
                                                    {{"a", a}, {"b", b}}, opts);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  const auto a = TD::zeros({2, 3}), b = TD::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), DimensionError);
  try {
    matmul(a, b);
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("softmax: uniform, stable and normalized") {
  const auto u = softmax_lastdim(TD::from({3}, {0, 0, 0}));
  for (auto v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  const auto big = softmax_lastdim(TD::from({3}, {1000, 0, 0}));
  CHECK(big.data()[0] == doctest::Approx(1.0));
  CHECK(big.data()[1] < 1e-300);
  const auto r = softmax_lastdim(TD::from({3}, {1, 2, 3}));
  CHECK(r.data()[0] == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(r.data()[1] == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(r.data()[2] == doctest::Approx(0.66524).epsilon(1e-4));

  std::mt19937_64 rng(11);
  const auto x = random_tensor(rng, {4, 5, 7}, false, 5.0);
  const auto y64 = softmax_lastdim(x);
  const auto y32 = softmax_lastdim(Tensor<float>::from(
      x.shape(), std::vector<float>(x.data().begin(), x.data().end())));
  for (std::size_t row = 0; row < 20; ++row) {
    double s64 = 0, s32 = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      s64 += y64.data()[row * 7 + j];
      s32 += y32.data()[row * 7 + j];
    }
    CHECK(std::abs(s64 - 1) < 1e-12);
    CHECK(std::abs(s32 - 1) < 1e-6);
  }
}

TEST_CASE("layer norm: constant, standardized and random inputs") {
  const auto ones = TD::full({4}, 1.0), zeros = TD::zeros({4});
  const auto c = layer_norm(TD::from({4}, {5, 5, 5, 5}), ones, zeros, 1e-5);
  for (auto v : c.data()) CHECK(v == 0.0);

  const auto s = TD::from({4}, {1, -1, 1, -1}); // mean 0, variance 1
  const auto ys = layer_norm(s, ones, zeros, 1e-5);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(ys.data()[i] == doctest::Approx(s.data()[i] / std::sqrt(1 + 1e-5)).epsilon(1e-14));

  std::mt19937_64 rng(12);
  const auto x = random_tensor(rng, {8}, false, 3.0);
  const auto y = layer_norm(x, TD::full({8}, 1.0), TD::zeros({8}), 1e-5);
  double mean = 0, var = 0, xm = 0, xv = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    mean += y.data()[i] / 8;
    xm += x.data()[i] / 8;
  }
  for (std::size_t i = 0; i < 8; ++i) {
    var += (y.data()[i] - mean) * (y.data()[i] - mean) / 8;
    xv += (x.data()[i] - xm) * (x.data()[i] - xm) / 8;
  }
  CHECK(std::abs(mean) < 1e-9);
  // exact value is xv / (xv + eps)
  CHECK(var == doctest::Approx(xv / (xv + 1e-5)).epsilon(1e-12));
  CHECK(std::abs(var - 1) < 1e-5 / xv * 2);
}

TEST_CASE("linear: bias, identity and shape") {
  std::mt19937_64 rng(13);
  const auto w = random_tensor(rng, {3, 4});
  const auto b = random_tensor(rng, {4});
  const auto y0 = linear(TD::zeros({2, 3}), w, b);
  for (std::size_t i = 0; i < 8; ++i) CHECK(y0.data()[i] == b.data()[i % 4]);
  const auto x = random_tensor(rng, {2, 3});
  const auto yi = linear(x, TD::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), TD::zeros({3}));
  for (std::size_t i = 0; i < 6; ++i) CHECK(yi.data()[i] == x.data()[i]);
  CHECK(linear(x, w, b).shape() == Shape{2, 4});
  CHECK_THROWS_AS(linear(TD::zeros({2, 5}), w, b), DimensionError);
}

TEST_CASE("elementwise examples") {
  std::mt19937_64 rng(14);
  const auto x = random_tensor(rng, {3, 2});
  const auto y = add(x, TD::zeros({3, 2}));
  for (std::size_t i = 0; i < 6; ++i) CHECK(y.data()[i] == x.data()[i]);
  const auto r = relu(TD::from({2}, {-1, 2}));
  CHECK(r.data()[0] == 0);
  CHECK(r.data()[1] == 2);
  CHECK_THROWS_AS(add(x, TD::zeros({2, 3})), DimensionError);

  auto v = random_tensor(rng, {5}, true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = sum(scale(v, 2.5));
    tape.backward(loss);
  }
  for (auto g : v.grad()) CHECK(g == 2.5);
  CHECK(check([&] { return sum(scale(v, 2.5)); }, {v}) < 1e-8);
}

TEST_CASE("backward: sums, products and accumulation") {
  std::mt19937_64 rng(15);
  auto x = random_tensor(rng, {3, 4}, true);
  auto w = random_tensor(rng, {4, 2}, true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = sum(x);
    tape.backward(loss);
  }
  for (auto g : x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = sum(matmul(x, w));
    tape.backward(loss);
  }
  // grad(w) = x^T ones: column sums of x, repeated over the outputs
  for (std::size_t p = 0; p < 4; ++p) {
    double col = 0;
    for (std::size_t i = 0; i < 3; ++i) col += x.data()[i * 4 + p];
    CHECK(w.grad()[p * 2] == doctest::Approx(col));
    CHECK(w.grad()[p * 2 + 1] == doctest::Approx(col));
  }

  // Two uses of w: grads from both paths add up.
  auto u = random_tensor(rng, {3, 4});
  auto f = [&] { return add(sum(matmul(x, w)), sum(relu(matmul(u, w)))); };
  CHECK(check(f, {x, w}) < 1e-6);
  w.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = sum(matmul(x, w));
    tape.backward(loss);
  }
  const auto path1 = grad_of(w);
  w.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = sum(relu(matmul(u, w)));
    tape.backward(loss);
  }
  const auto path2 = grad_of(w);
  w.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = f();
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < path1.size(); ++i)
    CHECK(w.grad()[i] == doctest::Approx(path1[i] + path2[i]).epsilon(1e-14));
}

TEST_CASE("backward: contract and bookkeeping") {
  std::mt19937_64 rng(16);
  auto x = random_tensor(rng, {2, 2}, true);
  auto unused = random_tensor(rng, {2}, true);
  unused.zero_grad();
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto y = relu(scale(x, 3.0));
    CHECK_THROWS_AS(tape.backward(y), ContractError);
    auto loss = mean(y);
    // scale, relu, then mean as sum + scale
    CHECK(tape.size() == 4);
    CHECK(tape.backward(loss) == 4);
  }
  for (auto g : unused.grad()) CHECK(g == 0.0);
  // Without an active tape nothing is recorded.
  const auto before = tape.size();
  (void)sum(mul(x, x));
  CHECK(tape.size() == before);
  CHECK(active_tape<double>() == nullptr);
}

TEST_CASE("gradcheck: quadratic is exact up to roundoff") {
  std::mt19937_64 rng(17);
  auto p = random_tensor(rng, {6}, true);
  GradcheckOptions opts;
  const auto r = finite_diff_gradcheck<double>([&] { return sum(mul(p, p)); }, {{"p", p}}, opts);
  CHECK(r.max_rel_err < 1e-8);
  CHECK(r.checked == 6);
}

TEST_CASE("gradcheck: relu kinks are skipped") {
  // One input sits within a step of zero; its perturbation flips the ReLU.
  auto x = TD::from({3}, {1.0, -2.0, 1e-7}, true);
  const auto r = finite_diff_gradcheck<double>([&] { return sum(relu(x)); }, {{"x", x}});
  CHECK(r.skipped_kinks == 1);
  CHECK(r.checked == 2);
  CHECK(r.max_rel_err < 1e-8);
}

TEST_CASE("every differentiable op passes gradcheck") {
  std::mt19937_64 rng(18);
  auto a = random_tensor(rng, {3, 4}, true);
  auto b = random_tensor(rng, {4, 2}, true);
  auto g3 = random_tensor(rng, {2, 3, 4}, true);
  auto h3 = random_tensor(rng, {2, 4, 5}, true);
  auto t3 = random_tensor(rng, {2, 5, 4}, true);
  auto w = random_tensor(rng, {4, 3}, true);
  auto bias = random_tensor(rng, {3}, true);
  auto c = random_tensor(rng, {3, 4}, true);
  auto gain = random_tensor(rng, {4}, true);
  auto row = random_tensor(rng, {4}, true);

  CHECK(check([&] { return weighted_sum(matmul(a, b), 1); }, {a, b}) < 1e-5);
  CHECK(check([&] { return weighted_sum(bmm(g3, h3), 2); }, {g3, h3}) < 1e-5);
  CHECK(check([&] { return weighted_sum(bmm(g3, t3, true), 3); }, {g3, t3}) < 1e-5);
  CHECK(check([&] { return weighted_sum(linear(g3, w, bias), 4); }, {g3, w, bias}) < 1e-5);
  CHECK(check([&] { return weighted_sum(add(a, c), 5); }, {a, c}) < 1e-5);
  CHECK(check([&] { return weighted_sum(sub(a, c), 6); }, {a, c}) < 1e-5);
  CHECK(check([&] { return weighted_sum(mul(a, c), 7); }, {a, c}) < 1e-5);
  CHECK(check([&] { return weighted_sum(scale(a, -0.7), 8); }, {a}) < 1e-5);
  CHECK(check([&] { return weighted_sum(relu(a), 9); }, {a}) < 1e-5);
  CHECK(check([&] { return weighted_sum(gelu(a), 10); }, {a}) < 1e-5);
  CHECK(check([&] { return weighted_sum(add_broadcast(g3, row), 11); }, {g3, row}) < 1e-5);
  CHECK(check([&] { return weighted_sum(expand(a, 3), 12); }, {a}) < 1e-5);
  CHECK(check([&] { return weighted_sum(softmax_lastdim(g3), 13); }, {g3}) < 1e-5);
  CHECK(check([&] { return weighted_sum(layer_norm(g3, gain, row, 1e-5), 14); },
              {g3, gain, row}) < 1e-5);
  CHECK(check([&] { return weighted_sum(reshape(g3, {4, 6}), 15); }, {g3}) < 1e-5);
  CHECK(check([&] { return weighted_sum(permute(g3, {2, 0, 1}), 16); }, {g3}) < 1e-5);
  CHECK(check([&] { return mean(mul(a, c)); }, {a, c}) < 1e-5);
}

TEST_CASE("random valid shapes never produce NaN") {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 1 + rng() % 3, m = 1 + rng() % 5, k = 1 + rng() % 5, n = 1 + rng() % 5;
    const auto x = random_tensor(rng, {b, m, k}, false, 10.0);
    const auto y = random_tensor(rng, {b, k, n}, false, 10.0);
    const auto out = layer_norm(softmax_lastdim(bmm(x, y)), TD::full({n}, 1.0), TD::zeros({n}), 1e-5);
    CHECK(out.shape() == Shape{b, m, n});
    for (auto v : out.data()) CHECK(std::isfinite(v));
    const auto p = permute(reshape(x, {b * m, k}), {1, 0});
    CHECK(p.shape() == Shape{k, b * m});
  }
  CHECK_THROWS_AS(reshape(TD::zeros({2, 3}), {4}), DimensionError);
}

TEST_CASE("identical inputs give identical bits") {
  std::mt19937_64 r1(20), r2(20);
  const auto x1 = random_tensor(r1, {4, 6, 8}), x2 = random_tensor(r2, {4, 6, 8});
  const auto y1 = softmax_lastdim(bmm(x1, x1, true));
  const auto y2 = softmax_lastdim(bmm(x2, x2, true));
  CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
}

}

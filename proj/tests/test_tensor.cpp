#include <cmath>
#include <vector>

#include "doctest.h"
#include "unicue/tensor.hpp"

using namespace unicue;

namespace {

// independent triple-loop oracle for matrix products
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b, int m, int k, int n) {
  std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a[static_cast<size_t>(i) * k + p] * b[static_cast<size_t>(p) * n + j];
      c[static_cast<size_t>(i) * n + j] = acc;
    }
  return c;
}

Tensor<double> random_tensor(Shape shape, Rng& rng, bool rg = true) {
  Tensor<double> t(std::move(shape), rg);
  for (auto& v : t.values()) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("matmul identity") {
  auto i2 = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor<double>::from({2, 2}, {3, 4, 5, 6});
  auto c = matmul(i2, b);
  CHECK(c.values() == b.values());
}

TEST_CASE("matmul against triple-loop oracle") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2, 1}, {5, 6});
  auto c = matmul(a, b);
  CHECK(c.at({0, 0}) == doctest::Approx(17.0));
  CHECK(c.at({1, 0}) == doctest::Approx(39.0));

  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor({3, 4}, rng, false);
    auto y = random_tensor({4, 2}, rng, false);
    auto z = matmul(x, y);
    auto expect = matmul_oracle(x.values(), y.values(), 3, 4, 2);
    for (size_t i = 0; i < z.numel(); ++i) CHECK(z.values()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}

TEST_CASE("matmul zero matrix") {
  auto z = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::from({3, 2}, {1, 2, 3, 4, 5, 6});
  auto c = matmul(z, b);
  for (double v : c.values()) CHECK(v == 0.0);
}

TEST_CASE("matmul shape mismatch reports both shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2,3)") != std::string::npos);
  }
}

TEST_CASE("matmul associativity on random 4x4 triples") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_tensor({4, 4}, rng, false);
    auto b = random_tensor({4, 4}, rng, false);
    auto c = random_tensor({4, 4}, rng, false);
    auto left = matmul(matmul(a, b), c);
    auto right = matmul(a, matmul(b, c));
    for (size_t i = 0; i < left.numel(); ++i)
      CHECK(std::abs(left.values()[i] - right.values()[i]) < 1e-9);
  }
}

TEST_CASE("softmax fixtures") {
  auto x = Tensor<double>::from({3}, {0, 0, 0});
  auto y = softmax(x, 0);
  for (double v : y.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  auto x2 = Tensor<double>::from({2}, {0.0, std::log(2.0)});
  auto y2 = softmax(x2, 0);
  CHECK(y2.at({0}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(y2.at({1}) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax shift invariance and simplex property") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor({4, 6}, rng, false);
    auto shifted = add_const(x, 13.5);
    auto a = softmax(x, 1);
    auto b = softmax(shifted, 1);
    for (size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.values()[i] - b.values()[i]) < 1e-7);
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int c = 0; c < 6; ++c) s += a.at({r, c});
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("softmax is overflow-safe on large finite inputs") {
  auto x = Tensor<double>::from({3}, {1e4, -1e4, 0.0});
  auto y = softmax(x, 0);
  for (double v : y.values()) CHECK(std::isfinite(v));
  CHECK(y.at({0}) == doctest::Approx(1.0));
}

TEST_CASE("backward on sum gives ones") {
  TapeScope<double> scope;
  auto w = Tensor<double>::from({3}, {4, 5, 6});
  w.set_requires_grad(true);
  auto loss = sum_all(w);
  scope.backward(loss);
  for (int i = 0; i < 3; ++i) CHECK(w.grad()[i] == 1.0);
}

TEST_CASE("backward on sum of squares, hand-differentiated") {
  TapeScope<double> scope;
  auto w = Tensor<double>::from({3}, {1, 2, 3});
  w.set_requires_grad(true);
  auto loss = sum_all(mul(w, w));
  scope.backward(loss);
  CHECK(w.grad()[0] == doctest::Approx(2.0));
  CHECK(w.grad()[1] == doctest::Approx(4.0));
  CHECK(w.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("repeated backward accumulates") {
  TapeScope<double> scope;
  auto w = Tensor<double>::from({2}, {1, 1});
  w.set_requires_grad(true);
  auto loss = sum_all(w);
  scope.backward(loss);
  scope.backward(loss);
  CHECK(w.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("detached branch contributes zero gradient") {
  TapeScope<double> scope;
  auto w = Tensor<double>::from({2}, {2, 3});
  w.set_requires_grad(true);
  auto blocked = detach(w);
  auto loss = sum_all(mul(blocked, blocked));
  scope.backward(loss);
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("backward rejects non-scalar loss") {
  TapeScope<double> scope;
  auto w = Tensor<double>::from({2}, {1, 2});
  w.set_requires_grad(true);
  auto y = mul(w, w);
  CHECK_THROWS_AS(scope.backward(y), std::invalid_argument);
}

TEST_CASE("grad_check on sum of squares and a linear map") {
  Rng rng(7);
  auto x = random_tensor({5}, rng);
  double err = grad_check<double>([&]() { return sum_all(mul(x, x)); }, {x}, 1e-5);
  CHECK(err <= 1e-6);

  auto y = random_tensor({4}, rng);
  err = grad_check<double>([&]() { return scale(sum_all(y), 3.0); }, {y}, 1e-5);
  CHECK(err <= 1e-9);
}

TEST_CASE("grad_check covers all primitives over 10 seeds") {
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    auto v = random_tensor({4}, rng);
    auto m2 = random_tensor({4, 3}, rng);

    CHECK(grad_check<double>([&]() { return mean_all(mul(add(a, b), sub(a, b))); }, {a, b}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return sum_all(mul(a, a)); }, {a}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return sum_all(relu(matmul(a, m2))); }, {a, m2}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return sum_all(mul(softmax(a, 1), b)); }, {a}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return sum_all(exp_elem(scale(a, 0.3))); }, {a}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return sum_all(mul(add(a, v), b)); }, {a, v}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return mse(a, b); }, {a, b}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return sum_all(mul(transpose2d(a), m2)); }, {a}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return sum_all(mul(mean_axis0(a), v)); }, {a}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return sum_all(slice_cols(concat_cols(a, b), 2, 6)); }, {a, b}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return kl_std_normal(a, b); }, {a, b}) <= 1e-4);

    auto img = random_tensor({2, 3, 6, 6}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    auto bias = random_tensor({4}, rng);
    CHECK(grad_check<double>([&]() { return mean_all(conv2d(img, w, bias, 2, 1)); }, {img, w, bias}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return sum_all(spatial_mean(conv2d(img, w, bias, 1, 1))); }, {img, w}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return sum_all(upsample2x(img)); }, {img}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return sum_all(add_channel_bias(img, Tensor<double>::from({3}, {1, 2, 3}))); },
                             {img}) <= 1e-4);
    auto gain = random_tensor({3}, rng);
    CHECK(grad_check<double>([&]() { return mean_all(mul_channel_gain(img, gain)); }, {img, gain}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return sum_all(concat_channels(img, mul_channel_gain(img, gain))); }, {img, gain}) <= 1e-4);

    auto seq = random_tensor({5, 3}, rng);
    auto w1 = random_tensor({4, 3, 3}, rng);
    auto b1 = random_tensor({4}, rng);
    CHECK(grad_check<double>([&]() { return mean_all(conv1d_same(seq, w1, b1)); }, {seq, w1, b1}) <= 1e-4);

    auto gamma = random_tensor({4}, rng);
    auto beta = random_tensor({4}, rng);
    CHECK(grad_check<double>([&]() { return sum_all(mul(layer_norm(a, gamma, beta), b)); }, {a, gamma, beta}) <= 1e-4);
    CHECK(grad_check<double>([&]() { return sum_all(mul(center_rows(a), b)); }, {a}) <= 1e-4);

    auto gimg = random_tensor({2, 4, 3, 3}, rng);
    auto ggam = random_tensor({4}, rng);
    auto gbet = random_tensor({4}, rng);
    auto gmix = random_tensor({2, 4, 3, 3}, rng);
    CHECK(grad_check<double>([&]() { return sum_all(mul(group_norm(gimg, 2, ggam, gbet), gmix)); },
                             {gimg, ggam, gbet}) <= 1e-4);

    auto logits = random_tensor({4, 7}, rng);
    std::vector<int> targets = {1, 0, 6, 3};
    CHECK(grad_check<double>([&]() { return cross_entropy(logits, targets, -1); }, {logits}) <= 1e-4);

    auto table = random_tensor({9, 4}, rng);
    std::vector<int> ids = {2, 2, 7};
    auto mix = random_tensor({3, 4}, rng, false);
    CHECK(grad_check<double>([&]() { return sum_all(mul(embedding_lookup(table, ids), mix)); }, {table}) <= 1e-4);

    auto lat = random_tensor({1, 2, 4, 4}, rng);
    auto tok_mix = random_tensor({16, 2}, rng, false);
    CHECK(grad_check<double>([&]() { return sum_all(mul(chw_to_tokens(lat), tok_mix)); }, {lat}) <= 1e-4);
  }
}

TEST_CASE("documented ops keep finite values on finite input") {
  Rng rng(23);
  auto a = random_tensor({4, 5}, rng, false);
  for (auto& v : a.values()) v *= 1e6;
  auto gamma = Tensor<double>::full({5}, 1.0);
  auto beta = Tensor<double>::zeros({5});
  for (const auto& t : {softmax(a, 1), layer_norm(a, gamma, beta), relu(a)})
    for (double v : t.values()) CHECK(std::isfinite(v));
}

#include "doctest.h"
#include "unicue/align.hpp"
#include "unicue/corpus.hpp"

using namespace unicue;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, bool rg = false) {
  Tensor<double> t(std::move(shape), rg);
  for (auto& v : t.values()) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("text encoder is deterministic and pools a single token trivially") {
  Rng rng(1);
  TextEncoder<double> enc(kVocabSize, AttentionConfig{8, 2}, 2, rng);
  const std::vector<int> ids = {kBosId, 5, 17, kEosId};
  auto a = enc.forward(ids);
  auto b = enc.forward(ids);
  CHECK(a.tokens.values() == b.tokens.values());
  CHECK(a.pooled.values() == b.pooled.values());

  auto single = enc.forward({9});
  CHECK(single.tokens.dim(0) == 1);
  for (int j = 0; j < 8; ++j) CHECK(single.pooled.at({j}) == doctest::Approx(single.tokens.at({0, j})));
}

TEST_CASE("text encoder rejects out-of-vocabulary ids") {
  Rng rng(2);
  TextEncoder<double> enc(kVocabSize, AttentionConfig{8, 2}, 1, rng);
  CHECK_THROWS_AS(enc.forward({43}), std::invalid_argument);
  CHECK_THROWS_AS(enc.forward({-1}), std::invalid_argument);
}

TEST_CASE("text encoder gradient check, N=3 D=8") {
  Rng rng(3);
  TextEncoder<double> enc(kVocabSize, AttentionConfig{8, 2}, 1, rng);
  for (auto& blk : enc.encoder.blocks)
    for (auto& v : blk.attn.wo.w.values()) v = rng.uniform(-0.3, 0.3);
  ParamList<double> params;
  enc.collect("text", params);
  std::vector<Tensor<double>> inputs;
  for (auto& p : params) inputs.push_back(p.tensor);
  auto target = random_tensor({8}, rng);
  const std::vector<int> ids = {kBosId, 11, kEosId};
  const double err = grad_check<double>([&]() { return mse(enc.forward(ids).pooled, target); }, inputs, 1e-5);
  CHECK(err <= 1e-4);
}

TEST_CASE("cosine alignment loss endpoints") {
  auto a = Tensor<double>::from({3}, {1.0, 2.0, -0.5});
  CHECK(cosine_align_loss(a, a).item() == doctest::Approx(0.0).epsilon(1e-12));

  auto x = Tensor<double>::from({2}, {1.0, 0.0});
  auto y = Tensor<double>::from({2}, {0.0, 3.0});
  CHECK(cosine_align_loss(x, y).item() == doctest::Approx(1.0));

  auto neg = Tensor<double>::from({3}, {-1.0, -2.0, 0.5});
  CHECK(cosine_align_loss(a, neg).item() == doctest::Approx(2.0));
}

TEST_CASE("cosine alignment loss on zero input is 1 with zero gradient") {
  TapeScope<double> scope;
  auto z = Tensor<double>::zeros({4});
  z.set_requires_grad(true);
  auto b = Tensor<double>::from({4}, {1, 2, 3, 4});
  b.set_requires_grad(true);
  auto loss = cosine_align_loss(z, b);
  CHECK(loss.item() == doctest::Approx(1.0));
  scope.backward(loss);
  for (int i = 0; i < 4; ++i) {
    CHECK(z.grad()[i] == 0.0);
    CHECK(b.grad()[i] == 0.0);
  }
}

TEST_CASE("cosine alignment loss is scale invariant and symmetric") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_tensor({6}, rng);
    auto b = random_tensor({6}, rng);
    const double base = cosine_align_loss(a, b).item();
    for (double c : {0.01, 0.5, 3.0, 1000.0}) {
      auto scaled = scale(a, c);
      CHECK(std::abs(cosine_align_loss(scaled, b).item() - base) < 1e-7);
    }
    CHECK(cosine_align_loss(b, a).item() == doctest::Approx(base).epsilon(1e-12));
    CHECK(base >= 0.0);
    CHECK(base <= 2.0);
  }
}

TEST_CASE("cosine alignment loss gradient matches finite differences") {
  Rng rng(5);
  for (uint64_t seed = 0; seed < 5; ++seed) {
    auto a = random_tensor({5}, rng, true);
    auto b = random_tensor({5}, rng, true);
    const double err = grad_check<double>([&]() { return cosine_align_loss(a, b); }, {a, b}, 1e-6);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("alignment pool loss composes the two cosine terms") {
  auto zt = Tensor<double>::from({4}, {1, 0, 2, -1});
  auto zv = Tensor<double>::from({4}, {2, 0, 4, -2});  // collinear with zt
  auto zp = Tensor<double>::from({4}, {0, 5, 0, 0});   // orthogonal to zt
  CHECK(alignment_pool_loss(zv, zp, zt).item() == doctest::Approx(1.0));
  CHECK(alignment_pool_loss(zt, zt, zt).item() == doctest::Approx(0.0));

  Rng rng(6);
  auto a = random_tensor({4}, rng);
  auto b = random_tensor({4}, rng);
  auto t = random_tensor({4}, rng);
  const double expect = cosine_align_loss(a, t).item() + cosine_align_loss(b, t).item();
  CHECK(alignment_pool_loss(a, b, t).item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK(alignment_pool_loss(a, b, t).item() >= 0.0);
  CHECK(alignment_pool_loss(a, b, t).item() <= 4.0);
}

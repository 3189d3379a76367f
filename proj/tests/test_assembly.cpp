#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "tardis/assembly.hpp"

using namespace tardis;

namespace {

constexpr int kC = 8;
constexpr int kK = 5;

Tensor random_grid(Rng& rng, int rows, int cols, bool grad = false) {
  Tensor t = Tensor::zeros({rows, cols}, grad);
  for (auto& v : t.data()) v = float(rng.uniform(-1.0, 1.0));
  return t;
}

void set_param(ParamList& ps, const std::string& name, std::vector<float> v) {
  for (auto& [n, t] : ps)
    if (n == name) t.data() = std::move(v);
}

}  // namespace

TEST_CASE("weights form a simplex per position for any finite input") {
  Rng rng(31);
  Assembly asm_(kC, rng);
  for (int n = 1; n <= 4; ++n) {
    std::vector<Tensor> reps;
    for (int m = 0; m < n + 1; ++m) reps.push_back(random_grid(rng, kK, kC));
    Tensor w = asm_.compute_weights(reps);
    REQUIRE(w.shape() == Shape{kK, n + 1});
    for (int p = 0; p < kK; ++p) {
      double sum = 0.0;
      for (int m = 0; m <= n; ++m) {
        const float v = w.data()[size_t(p) * (n + 1) + m];
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
        sum += v;
      }
      REQUIRE(std::fabs(sum - 1.0) < 1e-6);
    }
  }
  CHECK_THROWS_AS(asm_.compute_weights({}), std::invalid_argument);
  CHECK_THROWS_AS(asm_.compute_weights({Tensor::zeros({kK, kC + 1})}), std::invalid_argument);
}

TEST_CASE("identical representations split the softmax evenly") {
  Rng rng(32);
  Assembly asm_(kC, rng);
  Rng data(33);
  for (int n = 1; n <= 3; ++n) {
    Tensor g = random_grid(data, kK, kC);
    Tensor w = asm_.compute_weights(std::vector<Tensor>(size_t(n) + 1, g));
    for (int i = 0; i < w.numel(); ++i)
      CHECK(w.data()[size_t(i)] == doctest::Approx(1.0 / (n + 1)).epsilon(1e-6));
  }
}

TEST_CASE("hand-set scorer reproduces the softmax closed form") {
  Rng rng(34);
  Assembly asm_(2, rng);
  ParamList ps;
  asm_.params(ps);
  // Score becomes relu(first channel): s1 picks channel 0, s2 passes through.
  set_param(ps, "assembly.s1.w", {1, 0});
  set_param(ps, "assembly.s1.b", {0});
  set_param(ps, "assembly.s2.w", {1});
  set_param(ps, "assembly.s2.b", {0});

  const float ln3 = std::log(3.0f);
  Tensor a = Tensor::from({1, 2}, {0.0f, 7.0f});   // score ln 1
  Tensor b = Tensor::from({1, 2}, {ln3, -2.0f});   // score ln 3
  Tensor w = asm_.compute_weights({a, b});
  CHECK(w.data()[0] == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(w.data()[1] == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("weights vary across positions when the input does") {
  Rng rng(35);
  Assembly asm_(kC, rng);
  Rng data(36);
  Tensor w = asm_.compute_weights({random_grid(data, kK, kC), random_grid(data, kK, kC)});
  bool varies = false;
  for (int p = 1; p < kK; ++p)
    varies |= w.data()[size_t(p) * 2] != w.data()[0];
  CHECK(varies);
}

TEST_CASE("permuting dynamic grids permutes their weight columns exactly") {
  Rng rng(37);
  Assembly asm_(kC, rng);
  Rng data(38);
  Tensor s = random_grid(data, kK, kC);
  Tensor d1 = random_grid(data, kK, kC);
  Tensor d2 = random_grid(data, kK, kC);

  Tensor w123 = asm_.compute_weights({s, d1, d2});
  Tensor w132 = asm_.compute_weights({s, d2, d1});
  for (int p = 0; p < kK; ++p) {
    CHECK(w123.data()[size_t(p) * 3 + 0] == w132.data()[size_t(p) * 3 + 0]);
    CHECK(w123.data()[size_t(p) * 3 + 1] == w132.data()[size_t(p) * 3 + 2]);
    CHECK(w123.data()[size_t(p) * 3 + 2] == w132.data()[size_t(p) * 3 + 1]);
  }
}

TEST_CASE("fuse selects with one-hot weights and averages with uniform ones") {
  Rng data(39);
  Tensor a = random_grid(data, 3, 4);
  Tensor b = random_grid(data, 3, 4);

  Tensor pick_b = Tensor::zeros({3, 2});
  for (int p = 0; p < 3; ++p) pick_b.data()[size_t(p) * 2 + 1] = 1.0f;
  Tensor out = fuse({a, b}, pick_b);
  CHECK(std::memcmp(out.data().data(), b.data().data(), b.data().size() * sizeof(float)) == 0);

  Tensor half = Tensor::full({3, 2}, 0.5f);
  Tensor avg = fuse({a, b}, half);
  for (int i = 0; i < avg.numel(); ++i)
    CHECK(avg.data()[size_t(i)] ==
          doctest::Approx(0.5 * (a.data()[size_t(i)] + b.data()[size_t(i)])).epsilon(1e-6));

  CHECK_THROWS_AS(fuse({a, b}, Tensor::zeros({3, 3})), std::invalid_argument);
  CHECK_THROWS_AS(fuse({a, Tensor::zeros({2, 4})}, half), std::invalid_argument);
  CHECK_THROWS_AS(fuse({}, half), std::invalid_argument);
}

TEST_CASE("fuse output shape is independent of the representation count") {
  Rng rng(40);
  Assembly asm_(kC, rng);
  Rng data(41);
  for (int n = 1; n <= 4; ++n) {
    std::vector<Tensor> reps;
    for (int m = 0; m < n + 1; ++m) reps.push_back(random_grid(data, kK, kC));
    Tensor out = fuse(reps, asm_.compute_weights(reps));
    REQUIRE(out.shape() == Shape{kK, kC});
  }
}

TEST_CASE("finite differences validate gradients through weighting and fusion") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(500 + seed);
    Assembly asm_(4, rng);
    Tensor s = random_grid(rng, 3, 4);
    Tensor d = random_grid(rng, 3, 4, true);
    Tensor target = random_grid(rng, 3, 4);

    // Fixed weights: gradient onto each grid scales with its alpha column.
    Tensor w = Tensor::from({3, 2}, {0.3f, 0.7f, 0.9f, 0.1f, 0.5f, 0.5f});
    auto r1 = check_gradients(
        [&](const Tensor& dd) { return mse(fuse({s, dd}, w), target); }, d, 1e-3f, 1e-3f);
    REQUIRE(r1.pass);

    // Full path through the scorer softmax.
    auto r2 = check_gradients(
        [&](const Tensor& dd) {
          return mse(fuse({s, dd}, asm_.compute_weights({s, dd})), target);
        },
        d, 1e-3f, 2e-3f);
    REQUIRE(r2.pass);
  }
}
